use std::fmt;
use std::str::FromStr;

use super::ParallelExample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Prompt followed by the reference target, for teacher-forced training.
    Train,
    ZeroShot,
    /// `k` exemplar pairs (the first `k` of the pool) precede the query.
    FewShot(usize),
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptMode::Train => f.write_str("train"),
            PromptMode::ZeroShot => f.write_str("zero-shot"),
            PromptMode::FewShot(k) => write!(f, "few-shot-{k}"),
        }
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(PromptMode::Train),
            "zero-shot" | "zero_shot" => Ok(PromptMode::ZeroShot),
            _ => s
                .strip_prefix("few-shot-")
                .or_else(|| s.strip_prefix("few_shot_"))
                .and_then(|k| k.parse().ok())
                .map(PromptMode::FewShot)
                .ok_or_else(|| Error::Config(format!("unknown prompt mode `{s}`"))),
        }
    }
}

/// `Translate to {tgt_lang}:\n{src}\n`
pub fn prompt_template(tgt_lang: &str, src: &str) -> String {
    format!("Translate to {tgt_lang}:\n{src}\n")
}

/// A prompt split around the query's source text so that truncation can
/// shorten the source without touching the instruction or exemplars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formatted {
    pub prefix: String,
    pub source: String,
    pub target: Option<String>,
}

impl Formatted {
    pub fn prompt(&self) -> String {
        format!("{}{}\n", self.prefix, self.source)
    }

    /// Full text the model sees in training mode.
    pub fn text(&self) -> String {
        let mut s = self.prompt();
        if let Some(t) = &self.target {
            s.push_str(t);
        }
        s
    }
}

pub fn format_example(ex: &ParallelExample, mode: PromptMode, pool: &[ParallelExample]) -> Result<Formatted> {
    let mut prefix = String::new();
    if let PromptMode::FewShot(k) = mode {
        if k > pool.len() {
            return Err(Error::Invalid(format!(
                "{k}-shot prompt needs {k} exemplars, pool has {}",
                pool.len()
            )));
        }
        for shot in &pool[..k] {
            prefix.push_str(&prompt_template(&shot.tgt_lang, &shot.src_text));
            prefix.push_str(&shot.tgt_text);
            prefix.push('\n');
        }
    }
    prefix.push_str(&format!("Translate to {}:\n", ex.tgt_lang));
    Ok(Formatted {
        prefix,
        source: ex.src_text.clone(),
        target: (mode == PromptMode::Train).then(|| ex.tgt_text.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(i: usize) -> ParallelExample {
        ParallelExample::new(format!("s{i} x"), format!("t{i}"), "Bhili", "Hindi").unwrap()
    }

    #[test]
    fn zero_shot_is_the_bare_template() {
        let f = format_example(&ex(0), PromptMode::ZeroShot, &[]).unwrap();
        assert_eq!(f.prompt(), "Translate to Hindi:\ns0 x\n");
        assert_eq!(f.prompt(), prompt_template("Hindi", "s0 x"));
        assert!(f.target.is_none());
    }

    #[test]
    fn one_shot_has_one_exemplar() {
        let pool = [ex(1), ex(2), ex(3)];
        let f = format_example(&ex(0), PromptMode::FewShot(1), &pool).unwrap();
        assert_eq!(f.prompt(), "Translate to Hindi:\ns1 x\nt1\nTranslate to Hindi:\ns0 x\n");
        assert_eq!(f.prompt().matches("Translate to").count(), 2);
    }

    #[test]
    fn few_shot_needs_enough_exemplars() {
        assert!(format_example(&ex(0), PromptMode::FewShot(3), &[ex(1)]).is_err());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("few-shot-3".parse::<PromptMode>().unwrap(), PromptMode::FewShot(3));
        assert_eq!("zero-shot".parse::<PromptMode>().unwrap(), PromptMode::ZeroShot);
        assert!("many-shot".parse::<PromptMode>().is_err());
    }
}
