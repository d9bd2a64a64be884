//! Byte-level corpus handling.
//!
//! Any UTF-8 text file works: tokens are raw bytes (vocab 256), documents
//! are blank-line separated, and the validation split takes whole documents
//! so no window ever straddles the split. Windows are fixed-length,
//! non-overlapping, and drawn in a seeded shuffle order that reshuffles each
//! epoch, so a (corpus, seed) pair fully determines the batch stream.

use crate::error::{Error, Result};
use crate::tensor::substream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Train/validation byte pools, already split by document.
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Corpus {
    pub fn load(path: &Path, val_fraction: f64, seed: u64) -> Result<Corpus> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::input(format!("cannot read corpus {}: {e}", path.display())))?;
        Corpus::from_bytes(&bytes, val_fraction, seed)
    }

    /// Split on blank lines, shuffle documents with the seed, and send the
    /// first `val_fraction` of them to validation.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64, seed: u64) -> Result<Corpus> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        let text = String::from_utf8_lossy(bytes);
        let mut docs: Vec<&str> =
            text.split("\n\n").map(str::trim).filter(|d| !d.is_empty()).collect();
        if docs.is_empty() {
            return Err(Error::input("corpus contains no documents"));
        }
        let mut rng = substream(seed, "doc-split");
        docs.shuffle(&mut rng);
        let n_val = ((docs.len() as f64) * val_fraction).ceil() as usize;
        let n_val = n_val.min(docs.len().saturating_sub(1));
        let join = |slice: &[&str]| -> Vec<u8> {
            let mut out = Vec::new();
            for d in slice {
                out.extend_from_slice(d.as_bytes());
                out.push(b'\n');
            }
            out
        };
        Ok(Corpus { train: join(&docs[n_val..]), val: join(&docs[..n_val]) })
    }
}

/// Endless stream of [B, T] byte windows over one split.
pub struct BatchStream {
    windows: Vec<usize>,
    tokens: Vec<u8>,
    t: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(tokens: &[u8], t: usize, seed: u64, tag: &str) -> Result<BatchStream> {
        if t < 2 {
            return Err(Error::config("window length must be at least 2"));
        }
        let n = tokens.len() / t;
        if n == 0 {
            return Err(Error::input(format!(
                "split holds {} bytes, shorter than one {t}-byte window",
                tokens.len()
            )));
        }
        let mut s = BatchStream {
            windows: (0..n).collect(),
            tokens: tokens.to_vec(),
            t,
            order: Vec::new(),
            cursor: 0,
            rng: substream(seed, tag),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = self.windows.clone();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next window as usize tokens; wraps (and reshuffles) at epoch end.
    pub fn next_window(&mut self) -> Vec<usize> {
        if self.cursor == self.order.len() {
            self.reshuffle();
        }
        let w = self.order[self.cursor];
        self.cursor += 1;
        self.tokens[w * self.t..(w + 1) * self.t].iter().map(|&b| b as usize).collect()
    }

    pub fn next_batch(&mut self, b: usize) -> Vec<Vec<usize>> {
        (0..b).map(|_| self.next_window()).collect()
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }
}

// ── deterministic sample-corpus generator ───────────────────────────────────

const SUBJECTS: &[&str] = &[
    "the miller", "a traveler", "the old clockmaker", "her sister", "the harbor master",
    "a young scribe", "the gardener", "his neighbor", "the ferryman", "an apprentice",
    "the librarian", "the blacksmith", "a fisherman", "the innkeeper", "the surveyor",
    "the night watchman", "a wandering tinker", "the magistrate", "the rope maker",
    "an old soldier", "the candle merchant", "her youngest cousin", "the stonemason",
    "a quiet shepherd", "the tax collector", "the widow upstairs", "a hired courier",
    "the orchard keeper", "his landlord", "the bell ringer", "a visiting notary",
    "the charcoal burner", "the dock foreman", "an itinerant preacher", "the seamstress",
    "the brewer's son", "a retired pilot", "the lamplighter", "the furrier", "a map seller",
];

const VERBS: &[&str] = &[
    "carried", "repaired", "remembered", "counted", "described", "followed", "measured",
    "collected", "watched", "recorded", "sorted", "traded", "sketched", "weighed", "mended",
    "inspected", "bartered", "delivered", "misplaced", "catalogued", "borrowed", "polished",
    "inherited", "auctioned", "bundled", "stacked", "appraised", "unloaded", "labeled",
    "salvaged", "rationed", "shelved", "promised", "disputed", "transcribed", "stored",
];

const OBJECTS: &[&str] = &[
    "the copper kettle", "a bundle of letters", "the tide tables", "three sacks of grain",
    "the broken compass", "a map of the valley", "the evening lamps", "a crate of apples",
    "the ledger pages", "the mooring ropes", "a roll of canvas", "the garden wall",
    "the north road", "a pair of scales", "the winter stores", "a chest of horseshoe nails",
    "the customs seals", "a cask of lamp oil", "the parish records", "two bolts of linen",
    "the survey markers", "a tray of glass beads", "the granary keys", "an iron strongbox",
    "the ferry timetable", "a sack of walnut shells", "the quarry invoices", "a spool of wire",
    "the old census sheets", "a barrel of pitch", "the almanac proofs", "a carton of candles",
    "the bridge tolls", "a basket of river clay", "the auction notices", "the mill gears",
    "a ring of skeleton keys", "the vineyard stakes", "a pouch of clipped coins",
    "the lighthouse logs", "a stack of roof slates", "the harvest tallies",
];

const TAILS: &[&str] = &[
    "before the rain began", "while the market was open", "until the bell rang",
    "near the stone bridge", "after the long winter", "by the light of the lamp",
    "without saying a word", "as the fog lifted", "during the harvest week",
    "behind the old mill", "at the edge of the square", "once the roads were dry",
    "against the landlord's advice", "despite the broken axle", "under the customs awning",
    "while the tide was out", "before the ink had dried", "past the ruined gatehouse",
    "in the shadow of the granary", "after the ferry departed", "though nobody asked",
    "between the two warehouses", "wherever the ledgers disagreed", "until the frost broke",
    "beneath the counting-house stairs", "whenever the courier was late",
];

/// Deterministic English-like filler text with documents separated by blank
/// lines. Every byte comes from closed phrase pools, so the structure is
/// fully learnable: continued training keeps paying off instead of stalling
/// against injected noise, which is what makes a frozen-backbone run's own
/// learning visible at desk scale.
pub fn synth_corpus(n_bytes: usize, seed: u64) -> String {
    let mut rng = substream(seed, "synth-corpus");
    let mut out = String::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let sentences = rng.gen_range(4..12);
        for _ in 0..sentences {
            let s = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
            let v = VERBS[rng.gen_range(0..VERBS.len())];
            let o = OBJECTS[rng.gen_range(0..OBJECTS.len())];
            let tail = if rng.gen_bool(0.5) {
                format!(" {}", TAILS[rng.gen_range(0..TAILS.len())])
            } else {
                String::new()
            };
            let sentence = format!("{s} {v} {o}{tail}. ");
            let mut chars = sentence.chars();
            let head = chars.next().unwrap().to_uppercase().to_string();
            out.push_str(&head);
            out.push_str(chars.as_str());
        }
        out.push_str("\n\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_document_disjoint_and_seeded() {
        let text = b"alpha one two three\n\nbeta four five six\n\ngamma seven eight\n\ndelta nine ten";
        let c1 = Corpus::from_bytes(text, 0.25, 9).unwrap();
        let c2 = Corpus::from_bytes(text, 0.25, 9).unwrap();
        assert_eq!(c1.train, c2.train);
        assert_eq!(c1.val, c2.val);
        assert!(!c1.val.is_empty() && !c1.train.is_empty());
        // documents stay atomic: each split is a concatenation of whole docs
        let val_text = String::from_utf8(c1.val.clone()).unwrap();
        for doc in val_text.split('\n').filter(|d| !d.is_empty()) {
            assert!(!String::from_utf8(c1.train.clone()).unwrap().contains(doc));
        }
        let c3 = Corpus::from_bytes(text, 0.25, 10).unwrap();
        assert!(c3.val != c1.val || c3.train != c1.train, "different seed, different split");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Corpus::from_bytes(b"", 0.1, 1).is_err());
        assert!(Corpus::from_bytes(b"ok", 1.0, 1).is_err());
        let c = Corpus::from_bytes(b"tiny", 0.0, 1).unwrap();
        assert!(BatchStream::new(&c.train, 64, 1, "train").is_err(), "shorter than one window");
    }

    #[test]
    fn stream_is_reproducible_and_covers_windows() {
        // period-251 pattern keeps all sixteen 64-byte windows distinct
        let bytes: Vec<u8> = (0..1024).map(|i| (i % 251) as u8).collect();
        let mut s1 = BatchStream::new(&bytes, 64, 5, "train").unwrap();
        let mut s2 = BatchStream::new(&bytes, 64, 5, "train").unwrap();
        let b1 = s1.next_batch(4);
        let b2 = s2.next_batch(4);
        assert_eq!(b1, b2, "same seed gives the identical first batch");
        assert_eq!(b1.len(), 4);
        assert!(b1.iter().all(|w| w.len() == 64));
        assert_eq!(s1.n_windows(), 16);

        // one epoch visits every window exactly once
        let mut s = BatchStream::new(&bytes, 64, 7, "train").unwrap();
        let mut seen: Vec<Vec<usize>> = Vec::new();
        for _ in 0..16 {
            seen.push(s.next_window());
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 16);
        // wrapping reshuffles rather than panicking
        let _ = s.next_window();
    }

    #[test]
    fn synth_corpus_is_deterministic_ascii_with_documents() {
        let a = synth_corpus(10_000, 3);
        let b = synth_corpus(10_000, 3);
        assert_eq!(a, b);
        assert!(a.len() >= 10_000);
        assert!(a.is_ascii());
        assert!(a.contains("\n\n"), "documents must be blank-line separated");
        assert_ne!(a, synth_corpus(10_000, 4));
    }
}
