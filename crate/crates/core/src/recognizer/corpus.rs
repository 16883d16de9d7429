//! Word vocabulary and the synthetic pre-training corpus.

use std::collections::{BTreeSet, HashMap};

use diffcore::SeededRng;

use crate::error::{CoreError, Result};

pub const EOS: &str = "<eos>";
pub const TOKENS_SLOT: &str = "[tokens]";
pub const LIST_SLOT: &str = "[list]";

pub const SEEN_TEMPLATE: &str =
    "Given a sequence of action tokens [tokens], please predict the corresponding action.";
pub const UNSEEN_TEMPLATE: &str =
    "Given a sequence of action tokens [tokens], please predict the corresponding action from [list].";

/// Lowercases and splits on whitespace, keeping `,` and `.` as separate
/// words. Slot placeholders survive as single words.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace(',', " , ")
        .replace('.', " . ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with `<eos>` at id 0 and the remaining words in
    /// sorted order.
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != EOS).collect();
        let words: Vec<String> = std::iter::once(EOS.to_string()).chain(set).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Ids of the words of `text`; unknown words are a configuration error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text)
            .iter()
            .map(|w| {
                self.id(w).ok_or_else(|| {
                    CoreError::Config(format!("word '{w}' is not in the vocabulary"))
                })
            })
            .collect()
    }

    /// Space-joined words of `ids`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// What a person does in each known action, used to give class names
/// context in the corpus.
fn description(name: &str) -> &'static str {
    match name {
        "wave hand" => "raises one arm and swings the hand from side to side",
        "kick" => "swings one leg forward quickly while standing still",
        "jump up" => "bends both knees and pushes the body into the air",
        "sit down" => "lowers the hips slowly onto a chair",
        "stand up" => "pushes up from a chair and straightens the legs",
        "clap" => "brings both palms together repeatedly in front of the chest",
        "throw" => "pulls one arm back and snaps it forward to release an object",
        "bow" => "bends the upper body forward from the waist",
        "drink water" => "lifts a cup to the mouth and tilts the head back",
        "wipe face" => "rubs the face with one hand in small circles",
        "punch" => "drives a closed fist straight forward",
        "walk forward" => "steps ahead with alternating legs at a steady pace",
        _ => "performs a distinct motion with the whole body",
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub sentences: usize,
    /// Filler words placed in the instruction slot of pre-training examples.
    pub slot_len: usize,
    pub held_out_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sentences: 3000,
            slot_len: 16,
            held_out_fraction: 0.1,
        }
    }
}

/// Tokenized sentences split into training and held-out parts.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub class_names: Vec<String>,
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
}

impl Corpus {
    /// Fails if any word of any class name is missing from the vocabulary.
    pub fn check_names(&self, names: &[String]) -> Result<()> {
        for n in names {
            self.vocab.encode(n)?;
        }
        Ok(())
    }
}

/// Renders a template, filling `[tokens]` with `slot` words and `[list]`
/// with the comma-separated class list.
pub fn render_template(template: &str, slot: &[String], list: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for w in split_words(template) {
        match w.as_str() {
            TOKENS_SLOT => out.extend(slot.iter().cloned()),
            LIST_SLOT => {
                for (i, name) in list.iter().enumerate() {
                    if i > 0 {
                        out.push(",".into());
                    }
                    out.extend(split_words(name));
                }
            }
            _ => out.push(w),
        }
    }
    out
}

/// Generates description, naming and instruction-following sentences
/// about `class_names`.
pub fn build_corpus(
    class_names: &[String],
    cfg: &CorpusConfig,
    rng: &mut SeededRng,
) -> Result<Corpus> {
    if class_names.is_empty() {
        return Err(CoreError::Config(
            "corpus needs at least one class name".into(),
        ));
    }
    let descs: Vec<Vec<String>> = class_names
        .iter()
        .map(|n| split_words(description(n)))
        .collect();
    let mut sentences: Vec<Vec<String>> = Vec::with_capacity(cfg.sentences);
    for _ in 0..cfg.sentences {
        let k = rng.below(class_names.len());
        let name = split_words(&class_names[k]);
        let desc = &descs[k];
        let slot: Vec<String> = (0..cfg.slot_len)
            .map(|_| desc[rng.below(desc.len())].clone())
            .collect();
        let roll = rng.uniform();
        let mut s: Vec<String> = if roll < 0.45 {
            let mut s = render_template(SEEN_TEMPLATE, &slot, &[]);
            s.extend(name);
            s
        } else if roll < 0.6 && class_names.len() >= 3 {
            let mut list = vec![k];
            while list.len() < 3 {
                let j = rng.below(class_names.len());
                if !list.contains(&j) {
                    list.push(j);
                }
            }
            rng.shuffle(&mut list);
            let names: Vec<String> = list.iter().map(|&j| class_names[j].clone()).collect();
            let mut s = render_template(UNSEEN_TEMPLATE, &slot, &names);
            s.extend(name);
            s
        } else if roll < 0.8 {
            let mut s = split_words("a person");
            s.extend(desc.iter().cloned());
            s.extend(split_words(". this action is called"));
            s.extend(name);
            s.push(".".into());
            s
        } else if roll < 0.9 {
            let mut s = split_words("a person");
            s.extend(desc.iter().cloned());
            s.push(".".into());
            s
        } else {
            let mut s = name;
            s.extend(split_words("is an everyday action ."));
            s
        };
        s.push(EOS.into());
        sentences.push(s);
    }
    let mut words: Vec<String> = sentences.iter().flatten().cloned().collect();
    for t in [SEEN_TEMPLATE, UNSEEN_TEMPLATE] {
        words.extend(
            split_words(t)
                .into_iter()
                .filter(|w| w != TOKENS_SLOT && w != LIST_SLOT),
        );
    }
    for n in class_names {
        words.extend(split_words(n));
    }
    let vocab = Vocab::new(words);
    let ids: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| {
            s.iter()
                .map(|w| vocab.id(w).expect("word collected above"))
                .collect()
        })
        .collect();
    let n_held = ((ids.len() as f64) * cfg.held_out_fraction).round() as usize;
    let n_held = n_held.min(ids.len().saturating_sub(1));
    let split_at = ids.len() - n_held;
    let corpus = Corpus {
        vocab,
        class_names: class_names.to_vec(),
        held_out: ids[split_at..].to_vec(),
        train: ids[..split_at].to_vec(),
    };
    corpus.check_names(class_names)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_punctuation_and_slots() {
        assert_eq!(
            split_words("Given [tokens], please act."),
            vec!["given", "[tokens]", ",", "please", "act", "."]
        );
    }

    #[test]
    fn vocab_round_trip_and_oov() {
        let v = Vocab::new(["kick".to_string(), "jump".into(), "up".into()]);
        assert_eq!(v.word(0), EOS);
        let ids = v.encode("jump up").unwrap();
        assert_eq!(v.decode(&ids), "jump up");
        assert!(matches!(v.encode("fly"), Err(CoreError::Config(_))));
    }

    #[test]
    fn templates_render_to_expected_lengths() {
        let slot: Vec<String> = (0..16).map(|_| "arm".to_string()).collect();
        assert_eq!(render_template(SEEN_TEMPLATE, &slot, &[]).len(), 13 + 16);
        let list = vec!["kick".to_string(), "jump up".into(), "clap".into()];
        assert_eq!(
            render_template(UNSEEN_TEMPLATE, &slot, &list).len(),
            13 + 16 + 1 + 4 + 2
        );
    }

    #[test]
    fn corpus_covers_names_and_is_deterministic() {
        let names: Vec<String> = ["wave hand", "kick", "jump up", "clap"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cfg = CorpusConfig {
            sentences: 200,
            ..Default::default()
        };
        let a = build_corpus(&names, &cfg, &mut SeededRng::new(1)).unwrap();
        let b = build_corpus(&names, &cfg, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.held_out.len(), 20);
        assert!(a.check_names(&names).is_ok());
        assert!(a.check_names(&["somersault".to_string()]).is_err());
        assert!(a.train.iter().all(|s| *s.last().unwrap() == a.vocab.eos()));
    }
}
