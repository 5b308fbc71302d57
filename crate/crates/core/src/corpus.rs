//! Stimulus corpora: atomic contrastive pairs and slot-filled vignettes.
//!
//! Both corpora are stored as line-delimited JSON, one record per line. The
//! template bank is a single JSON document (see `data/templates.json`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::Factor;
use crate::rng;

/// Built-in bank: five scenario families with both-polarity fragments per slot.
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub pair_id: String,
    pub factor: Factor,
    pub text_pos: String,
    pub text_neg: String,
    pub domain_tag: String,
    #[serde(default)]
    pub verified: bool,
    /// Labels of the non-target factors, shared by both halves.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<Factor, u8>,
}

impl ContrastivePair {
    /// Factor labels `(sup, rel, weekday)` of the positive and negative halves.
    pub fn half_labels(&self) -> ([u8; 3], [u8; 3]) {
        let ctx = |f: Factor| self.context.get(&f).copied().unwrap_or(0);
        let base = [
            ctx(Factor::Superiority),
            ctx(Factor::Relevance),
            ctx(Factor::Weekday),
        ];
        let (mut pos, mut neg) = (base, base);
        match self.factor {
            Factor::Superiority => (pos[0], neg[0]) = (1, 0),
            Factor::Relevance => (pos[1], neg[1]) = (1, 0),
            Factor::Weekday => (pos[2], neg[2]) = (1, 0),
            Factor::Jealousy => {
                (pos[0], pos[1]) = (1, 1);
                (neg[0], neg[1]) = (0, 0);
            }
        }
        (pos, neg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vignette {
    pub vignette_id: String,
    pub family: String,
    pub text: String,
    pub sup: u8,
    pub rel: u8,
    pub weekday: u8,
    pub jealousy_gt: u8,
    pub slots: BTreeMap<Slot, String>,
}

impl Vignette {
    pub fn labels(&self) -> [u8; 3] {
        [self.sup, self.rel, self.weekday]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Relevance,
    Weekday,
    Failure,
    Superiority,
}

impl Slot {
    /// Text order of a vignette.
    pub const ORDER: [Slot; 4] = [Slot::Relevance, Slot::Weekday, Slot::Failure, Slot::Superiority];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Relevance => "relevance",
            Slot::Weekday => "weekday",
            Slot::Failure => "failure",
            Slot::Superiority => "superiority",
        }
    }

    /// Factor whose polarity selects this slot's fragment.
    pub fn factor(self) -> Factor {
        match self {
            Slot::Relevance => Factor::Relevance,
            Slot::Weekday => Factor::Weekday,
            Slot::Failure | Slot::Superiority => Factor::Superiority,
        }
    }

    fn pick(self, labels: [u8; 3]) -> u8 {
        match self.factor() {
            Factor::Superiority => labels[0],
            Factor::Relevance => labels[1],
            _ => labels[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub polarity: u8,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub id: String,
    pub domain: String,
    pub slots: BTreeMap<Slot, Vec<Fragment>>,
}

impl Family {
    fn fragments(&self, slot: Slot, polarity: u8) -> Vec<(usize, &Fragment)> {
        self.slots
            .get(&slot)
            .map(|v| {
                v.iter()
                    .enumerate()
                    .filter(|(_, f)| f.polarity == polarity)
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub families: Vec<Family>,
}

impl TemplateBank {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_TEMPLATES).expect("bundled template bank parses")
    }

    pub fn family(&self, id: &str) -> Option<&Family> {
        self.families.iter().find(|f| f.id == id)
    }

    pub fn family_ids(&self) -> Vec<String> {
        self.families.iter().map(|f| f.id.clone()).collect()
    }

    /// Checks that every family has at least one fragment of each polarity per slot.
    pub fn validate(&self) -> Result<()> {
        for fam in &self.families {
            for slot in Slot::ORDER {
                for polarity in [0, 1] {
                    if fam.fragments(slot, polarity).is_empty() {
                        return Err(Error::MissingFragment {
                            family: fam.id.clone(),
                            slot: slot.name().into(),
                            polarity,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rule-based jealousy label: (1,1) -> 5, (1,0) -> 2, (0,1) -> 1, (0,0) -> 1.
/// The placebo factor is never consulted.
pub fn assign_ground_truth(sup: u8, rel: u8) -> u8 {
    match (sup != 0, rel != 0) {
        (true, true) => 5,
        (true, false) => 2,
        (false, _) => 1,
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fragment choices for one (family, label triple, variant).
fn choose<'a>(
    fam: &'a Family,
    labels: [u8; 3],
    variant: usize,
    seed: u64,
) -> Result<Vec<(Slot, usize, &'a Fragment)>> {
    let mut options = Vec::with_capacity(4);
    for slot in Slot::ORDER {
        let polarity = slot.pick(labels);
        let frags = fam.fragments(slot, polarity);
        if frags.is_empty() {
            return Err(Error::MissingFragment {
                family: fam.id.clone(),
                slot: slot.name().into(),
                polarity,
            });
        }
        options.push((slot, frags));
    }
    let total: usize = options.iter().map(|(_, f)| f.len()).product();
    let triple = u64::from(labels[0]) << 2 | u64::from(labels[1]) << 1 | u64::from(labels[2]);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag(&fam.id), triple]));
    let mut code = order[variant % total];
    Ok(options
        .into_iter()
        .map(|(slot, frags)| {
            let (idx, frag) = frags[code % frags.len()];
            code /= frags.len();
            (slot, idx, frag)
        })
        .collect())
}

/// Emits one vignette per (family, sup, rel, weekday, variant). Variants of a
/// combination use distinct fragment choices while the bank allows it.
pub fn fill_templates(
    bank: &TemplateBank,
    families: &[String],
    variants_per_family: usize,
    seed: u64,
) -> Result<Vec<Vignette>> {
    let mut out = Vec::with_capacity(families.len() * 8 * variants_per_family);
    for id in families {
        let fam = bank
            .family(id)
            .ok_or_else(|| Error::Config(format!("unknown template family {id:?}")))?;
        for variant in 0..variants_per_family {
            for sup in 0..2u8 {
                for rel in 0..2u8 {
                    for weekday in 0..2u8 {
                        let labels = [sup, rel, weekday];
                        let picks = choose(fam, labels, variant, seed)?;
                        let text = normalize_ws(
                            &picks
                                .iter()
                                .map(|(_, _, f)| f.text.as_str())
                                .collect::<Vec<_>>()
                                .join(" "),
                        );
                        let slots = picks
                            .iter()
                            .map(|(slot, idx, _)| (*slot, format!("{}/{}/{idx}", fam.id, slot.name())))
                            .collect();
                        out.push(Vignette {
                            vignette_id: format!("{}-v{variant:02}-s{sup}r{rel}w{weekday}", fam.id),
                            family: fam.id.clone(),
                            text,
                            sup,
                            rel,
                            weekday,
                            jealousy_gt: assign_ground_truth(sup, rel),
                            slots,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Builds `count` atomic pairs for `factor` from the bank: both halves share
/// every fragment except the one(s) carrying the target polarity.
pub fn atomic_pairs(
    bank: &TemplateBank,
    factor: Factor,
    count: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    if bank.families.is_empty() {
        return Err(Error::Empty("template bank"));
    }
    let mut stream = rng::stream(seed, &[rng::tag(factor.name())]);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let fam = &bank.families[i % bank.families.len()];
        let mut context = BTreeMap::new();
        for other in Factor::PREDICTORS {
            let involved = match factor {
                Factor::Jealousy => Factor::ANTECEDENTS.contains(&other),
                f => f == other,
            };
            if !involved {
                context.insert(other, stream.random_range(0..2u8));
            }
        }
        let pair = ContrastivePair {
            pair_id: format!("{}-{i:03}", factor.name()),
            factor,
            text_pos: String::new(),
            text_neg: String::new(),
            domain_tag: fam.domain.clone(),
            verified: false,
            context,
        };
        let (pos, neg) = pair.half_labels();
        let ranks: [usize; 4] = std::array::from_fn(|_| stream.random_range(0..1024));
        let text = |labels: [u8; 3]| -> Result<String> {
            let mut parts = Vec::with_capacity(4);
            for (slot, rank) in Slot::ORDER.into_iter().zip(ranks) {
                let polarity = slot.pick(labels);
                let frags = fam.fragments(slot, polarity);
                if frags.is_empty() {
                    return Err(Error::MissingFragment {
                        family: fam.id.clone(),
                        slot: slot.name().into(),
                        polarity,
                    });
                }
                parts.push(frags[rank % frags.len()].1.text.as_str());
            }
            Ok(normalize_ws(&parts.join(" ")))
        };
        out.push(ContrastivePair {
            text_pos: text(pos)?,
            text_neg: text(neg)?,
            ..pair
        });
    }
    Ok(out)
}

fn validate_pair(pair: &ContrastivePair) -> Result<(), String> {
    if pair.pair_id.is_empty() {
        return Err("empty pair_id".into());
    }
    if pair.text_pos == pair.text_neg {
        return Err(format!("pair {:?}: text_pos equals text_neg", pair.pair_id));
    }
    if let Some((f, v)) = pair.context.iter().find(|(_, &v)| v > 1) {
        return Err(format!("pair {:?}: context label {f} = {v}", pair.pair_id));
    }
    Ok(())
}

/// Reads line-delimited pairs. Blank lines are skipped; line numbers are 1-based.
pub fn load_pairs<R: BufRead>(source: R) -> Result<Vec<ContrastivePair>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ContrastivePair = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_pair(&pair).map_err(|message| Error::Schema {
            line: i + 1,
            message,
        })?;
        if !seen.insert(pair.pair_id.clone()) {
            return Err(Error::Duplicate(pair.pair_id));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn save_jsonl<W: Write, T: Serialize>(items: &[T], sink: &mut W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *sink, item)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_vignettes<R: BufRead>(source: R) -> Result<Vec<Vignette>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vignette = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        if v.sup > 1 || v.rel > 1 || v.weekday > 1 || v.jealousy_gt != assign_ground_truth(v.sup, v.rel) {
            return Err(Error::Schema {
                line: i + 1,
                message: format!("vignette {:?}: labels inconsistent with the label map", v.vignette_id),
            });
        }
        if !seen.insert(v.vignette_id.clone()) {
            return Err(Error::Duplicate(v.vignette_id));
        }
        out.push(v);
    }
    Ok(out)
}

/// Pair-level fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, pair_id: &str) -> Option<usize> {
        self.folds.get(pair_id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle, then round-robin: fold sizes differ by at most one.
pub fn kfold_split<S: AsRef<str>>(pair_ids: &[S], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > pair_ids.len() {
        return Err(Error::TooFewPairs {
            k,
            n: pair_ids.len(),
        });
    }
    let mut ids: Vec<&str> = pair_ids.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Duplicate(w[0].to_owned()));
    }
    ids.shuffle(&mut rng::stream(seed, &[rng::tag("kfold")]));
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_owned(), i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}

/// Model judgement of a contrastive pair: was each half rated "High"?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairJudgement {
    pub pos_high: bool,
    pub neg_high: bool,
}

impl PairJudgement {
    pub fn agrees(&self) -> bool {
        self.pos_high && !self.neg_high
    }
}

/// Keeps items whose prediction agrees with their label under `rule`.
pub fn consistency_filter<T: Clone, P>(
    items: &[T],
    id: impl Fn(&T) -> &str,
    predictions: &HashMap<String, P>,
    rule: impl Fn(&T, &P) -> bool,
) -> Result<Vec<T>> {
    let mut kept = Vec::new();
    for item in items {
        let key = id(item);
        let pred = predictions
            .get(key)
            .ok_or_else(|| Error::MissingPrediction(key.to_owned()))?;
        if rule(item, pred) {
            kept.push(item.clone());
        }
    }
    Ok(kept)
}

/// [`consistency_filter`] specialised to contrastive pairs.
pub fn filter_pairs(
    pairs: &[ContrastivePair],
    judgements: &HashMap<String, PairJudgement>,
) -> Result<Vec<ContrastivePair>> {
    consistency_filter(pairs, |p| &p.pair_id, judgements, |_, j| j.agrees())
}
