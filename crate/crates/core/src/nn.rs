//! Small layer helpers shared by the codec and the language model.

use diffcore::{ParamId, ParamSet, SeededRng, Tape, Tensor, Var};

use crate::error::Result;

/// A dense layer `x W + b` registered in a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            w: params.add(
                format!("{name}.w"),
                rng.normal_tensor(&[fan_in, fan_out], std),
                true,
            ),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), true),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &diffcore::Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound[self.w])?;
        Ok(tape.add(h, bound[self.b])?)
    }
}

/// A 1-D convolution over stacked sequences with a bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            w: params.add(
                format!("{name}.w"),
                rng.normal_tensor(&[kernel * cin, cout], std),
                true,
            ),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[1, cout]), true),
            kernel,
            stride,
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &diffcore::Bound,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        let h = tape.conv1d(x, bound[self.w], batch, self.kernel, self.stride)?;
        Ok(tape.add(h, bound[self.b])?)
    }
}

/// Index of the smallest entry; the lowest index wins ties.
pub fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arg_extrema_prefer_lowest_index() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[0.0, 3.0, 3.0]), 1);
        assert_eq!(argmin(&[5.0]), 0);
    }
}
