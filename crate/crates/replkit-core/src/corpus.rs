//! Tokenization, vocabulary, JSONL corpus I/O, and the synthetic
//! keyword-stacked title generator.
//!
//! The generator stands in for a proprietary e-commerce title corpus: titles
//! are built from keyword groups (modifier words plus a head noun), the toy
//! "translation" maps each word through a fixed bilingual lexicon and inverts
//! the word order inside each group, and `stacked` titles repeat one keyword
//! group several times the way real listing titles stack synonyms. Gold
//! references preserve the source's repetition structure, so legitimate
//! repetition survives in the target side.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SEP_ID: usize = 4;

/// Reserved tokens occupying the first vocabulary slots, in id order.
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

// ── Vocabulary ───────────────────────────────────────────────────────

/// Whitespace-token vocabulary with fixed reserved ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from token frequency: most frequent first, ties broken
    /// lexicographically, truncated to `max_size` (reserved slots included).
    pub fn build(pairs: &[CorpusPair], max_size: usize) -> Result<Vocab> {
        if max_size <= RESERVED_TOKENS.len() {
            return Err(CorpusError::Invalid(format!(
                "max_size must exceed {} reserved slots",
                RESERVED_TOKENS.len()
            )));
        }
        if pairs.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in pairs {
            for tok in pair.src.split_whitespace().chain(pair.reference.split_whitespace()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        for (tok, _) in ranked {
            if id_to_token.len() >= max_size {
                break;
            }
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Whitespace-tokenize and map to ids; unseen tokens become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Inverse of [`Vocab::encode`] for in-vocabulary ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Corpus records ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairTag {
    Clean,
    Stacked,
}

/// A parallel source/reference pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusPair {
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<PairTag>,
}

impl CorpusPair {
    pub fn new(src: impl Into<String>, reference: impl Into<String>) -> Self {
        CorpusPair {
            src: src.into(),
            reference: reference.into(),
            tag: None,
        }
    }
}

/// A decoded hypothesis alongside its pair, as written by the decode stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
}

// ── JSONL I/O ────────────────────────────────────────────────────────

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        // Normalize CRLF input.
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("serializable record"));
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(buf.as_bytes()).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_jsonl(path: &Path) -> Result<Vec<CorpusPair>> {
    let pairs: Vec<CorpusPair> = read_jsonl(path)?;
    for (i, p) in pairs.iter().enumerate() {
        if p.src.trim().is_empty() || p.reference.trim().is_empty() {
            return Err(CorpusError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: "src and ref must be non-empty".into(),
            });
        }
    }
    Ok(pairs)
}

pub fn save_jsonl(path: &Path, pairs: &[CorpusPair]) -> Result<()> {
    write_jsonl(path, pairs)
}

pub fn load_eval_jsonl(path: &Path) -> Result<Vec<EvalRecord>> {
    read_jsonl(path)
}

pub fn save_eval_jsonl(path: &Path, records: &[EvalRecord]) -> Result<()> {
    write_jsonl(path, records)
}

// ── Synthetic generator ──────────────────────────────────────────────

/// Generator parameters, recorded in the sidecar manifest for reproducibility.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_pairs: usize,
    pub stack_ratio: f64,
}

/// Keyword groups: source words with their per-word translations. Words are
/// globally unique across groups so clean titles never repeat a bigram.
const GROUPS: &[(&[&str], &[&str])] = &[
    (&["baseball", "cap"], &["basisball", "kappe"]),
    (&["embroidered", "hat"], &["bestickt", "hut"]),
    (&["mini", "excavator"], &["klein", "bagger"]),
    (&["crawler", "digger"], &["raupen", "grabmaschine"]),
    (&["hydraulic", "breaker"], &["hydraulisch", "brecher"]),
    (&["billiard", "pool", "table"], &["billard", "becken", "tisch"]),
    (&["air", "hockey"], &["luft", "eishockey"]),
    (&["rotating", "game", "board"], &["drehbar", "spiel", "brett"]),
    (&["shapewear", "dress"], &["former", "kleid"]),
    (&["maxi", "gown"], &["lang", "robe"]),
    (&["outdoor", "jacket"], &["draussen", "jacke"]),
    (&["waterproof", "boots"], &["wasserdicht", "stiefel"]),
    (&["wireless", "earbuds"], &["drahtlos", "hoerer"]),
    (&["portable", "speaker"], &["tragbar", "lautsprecher"]),
    (&["gaming", "mouse"], &["spieler", "maus"]),
    (&["mechanical", "keyboard"], &["mechanisch", "tastatur"]),
    (&["stainless", "steel", "bottle"], &["rostfrei", "stahl", "flasche"]),
    (&["ceramic", "mug"], &["keramik", "becher"]),
    (&["folding", "chair"], &["klappbar", "stuhl"]),
    (&["camping", "tent"], &["lager", "zelt"]),
    (&["solar", "lantern"], &["sonnen", "laterne"]),
    (&["electric", "scooter"], &["elektro", "roller"]),
    (&["leather", "wallet"], &["leder", "boerse"]),
    (&["canvas", "backpack"], &["segeltuch", "rucksack"]),
    (&["cotton", "shirt"], &["baumwolle", "hemd"]),
    (&["denim", "jeans"], &["jeansstoff", "hose"]),
    (&["silicone", "case"], &["silikon", "huelle"]),
    (&["tempered", "glass", "screen"], &["gehaertet", "glas", "schirm"]),
    (&["plastic", "container"], &["kunststoff", "behaelter"]),
    (&["bamboo", "cutting", "kit"], &["bambus", "schneide", "satz"]),
    (&["magnetic", "holder"], &["magnet", "halter"]),
    (&["adjustable", "stand"], &["verstellbar", "staender"]),
    (&["luxury", "watch"], &["luxus", "uhr"]),
    (&["crystal", "necklace"], &["kristall", "kette"]),
    (&["wooden", "toy", "train"], &["holz", "spielzeug", "zug"]),
    (&["vintage", "lamp"], &["antik", "lampe"]),
    (&["velvet", "cushion"], &["samt", "kissen"]),
    (&["marble", "tray"], &["marmor", "tablett"]),
    (&["copper", "kettle"], &["kupfer", "kessel"]),
    (&["nylon", "rope"], &["nylonfaser", "seil"]),
    (&["rubber", "mat"], &["gummi", "matte"]),
    (&["carbon", "frame"], &["karbon", "rahmen"]),
];

fn rng_below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn rng_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let cand = rng_below(rng, n);
        if !picked.contains(&cand) {
            picked.push(cand);
        }
    }
    picked
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng_below(rng, i + 1);
        items.swap(i, j);
    }
}

fn group_src(idx: usize) -> Vec<&'static str> {
    GROUPS[idx].0.to_vec()
}

/// Translation of one group: per-word lexicon lookup plus word-order
/// inversion inside the group.
fn group_tgt(idx: usize) -> Vec<&'static str> {
    let mut words = GROUPS[idx].1.to_vec();
    words.reverse();
    words
}

/// Deterministically generate `n_pairs` titles; roughly `stack_ratio` of them
/// stack one keyword group 2-4 times, the rest are repetition-free.
pub fn gen_synthetic(seed: u64, n_pairs: usize, stack_ratio: f64) -> Result<Vec<CorpusPair>> {
    if !(0.0..=1.0).contains(&stack_ratio) {
        return Err(CorpusError::Invalid(format!(
            "stack_ratio must be in [0, 1], got {stack_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let stacked = rng_f64(&mut rng) < stack_ratio;
        let pair = if stacked {
            let repeats = 2 + rng_below(&mut rng, 3); // 2..=4 occurrences
            let n_fill = 1 + rng_below(&mut rng, 2); // 1..=2 distinct filler groups
            let chosen = sample_distinct(&mut rng, GROUPS.len(), 1 + n_fill);
            let stack_idx = chosen[0];
            let mut layout: Vec<usize> = vec![stack_idx; repeats];
            layout.extend_from_slice(&chosen[1..]);
            shuffle(&mut rng, &mut layout);
            build_pair(&layout, Some(PairTag::Stacked))
        } else {
            let k = 2 + rng_below(&mut rng, 3); // 2..=4 distinct groups
            let layout = sample_distinct(&mut rng, GROUPS.len(), k);
            build_pair(&layout, Some(PairTag::Clean))
        };
        pairs.push(pair);
    }
    Ok(pairs)
}

fn build_pair(layout: &[usize], tag: Option<PairTag>) -> CorpusPair {
    let src: Vec<&str> = layout.iter().flat_map(|&i| group_src(i)).collect();
    let tgt: Vec<&str> = layout.iter().flat_map(|&i| group_tgt(i)).collect();
    CorpusPair {
        src: src.join(" "),
        reference: tgt.join(" "),
        tag,
    }
}

/// Deterministic shuffle split into (train, eval) with `eval_fraction` of the
/// pairs held out.
pub fn split_pairs(pairs: &[CorpusPair], eval_fraction: f64, seed: u64) -> (Vec<CorpusPair>, Vec<CorpusPair>) {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut rng, &mut order);
    let n_eval = ((pairs.len() as f64) * eval_fraction).round() as usize;
    let n_eval = n_eval.min(pairs.len());
    let eval: Vec<CorpusPair> = order[..n_eval].iter().map(|&i| pairs[i].clone()).collect();
    let train: Vec<CorpusPair> = order[n_eval..].iter().map(|&i| pairs[i].clone()).collect();
    (train, eval)
}
