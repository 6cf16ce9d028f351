use serde::{Deserialize, Serialize};

use super::signature::BehavioralSignature;
use crate::error::{Error, Result};
use crate::neural_stl::ComponentKind;
use crate::numerics::{name_hash, ParamId, ParamStore, Tensor};

/// Four significant digits, locale-independent; scientific notation outside
/// `[1e-4, 1e6)`.
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.3e}");
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-4..6).contains(&exp) {
        let decimals = (3 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

fn strength(r: f64) -> &'static str {
    let a = r.abs();
    if a >= 0.7 {
        "strong"
    } else if a >= 0.4 {
        "moderate"
    } else {
        "weak"
    }
}

/// Describes one component window in fixed words.
pub fn render_fbp_text(sig: &BehavioralSignature, kind: ComponentKind) -> String {
    let mut s = format!(
        "{} component . trend is {} with slope {} . range from {} to {} , mean {} , variance {} .",
        kind.name(),
        sig.trend.label(),
        format_sig4(sig.slope),
        format_sig4(sig.min),
        format_sig4(sig.max),
        format_sig4(sig.mean),
        format_sig4(sig.var),
    );
    if sig.top_lags.is_empty() {
        s.push_str(" no autocorrelation structure .");
    }
    for l in &sig.top_lags {
        s.push_str(&format!(
            " lag {} has {} {} autocorrelation {} .",
            l.lag,
            strength(l.acf),
            if l.acf >= 0.0 { "positive" } else { "negative" },
            format_sig4(l.acf)
        ));
    }
    s
}

/// Dataset-level facts used for the corpus prompt.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusMeta {
    pub domain: Option<String>,
    pub frequency: Option<String>,
    pub channels: Option<usize>,
}

pub fn render_csp_text(meta: &CorpusMeta) -> String {
    let unknown = || "unknown".to_string();
    format!(
        "dataset domain : {} . sampling frequency : {} . number of channels : {} .",
        meta.domain.clone().unwrap_or_else(unknown),
        meta.frequency.clone().unwrap_or_else(unknown),
        meta.channels.map(|c| c.to_string()).unwrap_or_else(unknown),
    )
}

const VOCAB: &[&str] = &[
    ",", ".", ":", ";", "a", "and", "autocorrelation", "channels", "component", "dataset", "day", "days", "decreasing",
    "domain", "energy", "finance", "frequency", "from", "has", "health", "hour", "hours", "increasing", "is", "lag",
    "mean", "minute", "minutes", "moderate", "negative", "no", "number", "of", "positive", "range", "residual",
    "sampling", "seasonal", "second", "seconds", "series", "slightly", "slope", "stable", "strong", "strongly",
    "structure", "temperature", "the", "to", "traffic", "trend", "unknown", "variance", "weak", "weather", "week",
    "weeks", "with",
];

/// Number of byte-fallback ids at the start of the id space.
pub const BYTE_TOKENS: usize = 256;

/// Whitespace tokenizer over a small fixed vocabulary. Known words hash into
/// `vocab_size − 256` buckets; anything else falls back to one id per byte.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<Vec<usize>> {
    if vocab_size <= BYTE_TOKENS {
        return Err(Error::Config(format!("vocabulary must exceed {BYTE_TOKENS} ids")));
    }
    let buckets = (vocab_size - BYTE_TOKENS) as u64;
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        if VOCAB.binary_search(&lower.as_str()).is_ok() {
            ids.push(BYTE_TOKENS + (name_hash(&lower) % buckets) as usize);
        } else {
            ids.extend(word.bytes().map(usize::from));
        }
    }
    if ids.is_empty() {
        return Err(Error::invalid("cannot embed an empty text"));
    }
    Ok(ids)
}

/// Frozen, seeded embedding table standing in for a pretrained language
/// model's input embeddings.
#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    pub table: ParamId,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl FrozenTextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, d_model: usize) -> Result<Self> {
        if vocab_size <= BYTE_TOKENS {
            return Err(Error::Config(format!("vocabulary must exceed {BYTE_TOKENS} ids")));
        }
        let table = store.uniform(&format!("{name}.embedding"), &[vocab_size, d_model], 3f64.sqrt(), true)?;
        Ok(Self {
            table,
            vocab_size,
            d_model,
        })
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self.vocab_size)
    }

    /// Embedding rows `[L, D]` of the text's tokens.
    pub fn embed(&self, store: &ParamStore, text: &str) -> Result<Tensor> {
        let ids = self.tokenize(text)?;
        self.rows(store, &ids)
    }

    pub fn rows(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let t = store.value(self.table);
        let d = self.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= self.vocab_size {
                return Err(Error::invalid(format!("token id {i} outside the vocabulary")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(&[ids.len(), d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::signature::extract_signature;

    #[test]
    fn vocabulary_is_sorted() {
        assert!(VOCAB.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sig4_formatting() {
        assert_eq!(format_sig4(1234.5678), "1235");
        assert_eq!(format_sig4(0.012345), "0.01235");
        assert_eq!(format_sig4(9.99996), "10.00");
        assert_eq!(format_sig4(-2.0), "-2.000");
        assert_eq!(format_sig4(1.5e9), "1.500e9");
        assert_eq!(format_sig4(0.0), "0");
    }

    #[test]
    fn stable_text_mentions_stable() {
        let sig = extract_signature(&[1.0; 10], 3).unwrap();
        let t = render_fbp_text(&sig, ComponentKind::Trend);
        assert!(t.split_whitespace().any(|w| w == "stable"));
        assert_eq!(t, render_fbp_text(&sig, ComponentKind::Trend));
    }

    #[test]
    fn lag_sentence_count() {
        let z: Vec<f64> = (0..48).map(|t| (t as f64 * 0.7).sin() + 0.01 * t as f64).collect();
        let sig = extract_signature(&z, 2).unwrap();
        let t = render_fbp_text(&sig, ComponentKind::Seasonal);
        assert_eq!(t.matches(" lag ").count(), 2);
    }

    #[test]
    fn corpus_text() {
        let meta = CorpusMeta {
            domain: Some("Temperature".into()),
            frequency: Some("1 hour".into()),
            channels: Some(7),
        };
        let t = render_csp_text(&meta);
        assert!(t.contains("Temperature") && t.contains("1 hour"));
        assert_eq!(render_csp_text(&CorpusMeta::default()).matches("unknown").count(), 3);
    }

    #[test]
    fn byte_fallback_and_determinism() {
        let a = tokenize("trend zq", 4096).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a[0] >= BYTE_TOKENS);
        assert_eq!(&a[1..], &[b'z' as usize, b'q' as usize]);
        assert_eq!(a, tokenize("trend zq", 4096).unwrap());
        assert!(tokenize("   ", 4096).is_err());
    }

    #[test]
    fn embedding_rows() {
        let mut s = ParamStore::new(1);
        let enc = FrozenTextEncoder::new(&mut s, "text", 512, 8).unwrap();
        let e = enc.embed(&s, "trend is stable").unwrap();
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e, enc.embed(&s, "trend is stable").unwrap());
    }
}
