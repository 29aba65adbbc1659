//! Validated, truncated id sequences ready for the forward pass.

use alloc::format;
use alloc::vec::Vec;

use crate::datagen::{ObservableRecord, UserJourneyRecord};
use crate::error::{Error, Result};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqKind {
    Hist,
    Ad,
}

impl SeqKind {
    pub const ALL: [SeqKind; 2] = [SeqKind::Hist, SeqKind::Ad];

    pub fn name(self) -> &'static str {
        match self {
            SeqKind::Hist => "hist",
            SeqKind::Ad => "ad",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// Item ids with a validity mask. Invalid positions are padding and never
/// influence any output.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SeqFeatures {
    pub items: Vec<u32>,
    pub mask: Vec<bool>,
}

impl SeqFeatures {
    /// Keeps the first `cap` ids, in order.
    pub fn truncated(items: &[u32], cap: usize) -> Self {
        let items: Vec<u32> = items.iter().take(cap).copied().collect();
        let mask = alloc::vec![true; items.len()];
        SeqFeatures { items, mask }
    }

    /// Appends `n` masked padding positions.
    pub fn padded(mut self, n: usize) -> Self {
        self.items.extend(core::iter::repeat(0).take(n));
        self.mask.extend(core::iter::repeat(false).take(n));
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    fn check(&self, field: &str, vocab: usize) -> Result<()> {
        if self.items.len() != self.mask.len() {
            return Err(Error::Contract(format!("`{field}` mask length differs from its items")));
        }
        // padding ids are gathered too, so they must be in range as well
        for (pos, &id) in self.items.iter().enumerate() {
            if (id as usize) >= vocab {
                return Err(Error::Input(format!(
                    "`{field}` position {pos}: item id {id} is outside the vocabulary of {vocab}"
                )));
            }
        }
        Ok(())
    }
}

/// Bid-time inputs of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableFeatures {
    pub profile_cat: Vec<u32>,
    pub profile_dense: Vec<f64>,
    pub hist: SeqFeatures,
    pub ad: SeqFeatures,
}

impl ObservableFeatures {
    pub fn from_observable(r: &ObservableRecord, c: &ModelConfig) -> Result<Self> {
        let f = ObservableFeatures {
            profile_cat: r.profile_cat.clone(),
            profile_dense: r.profile_dense.clone(),
            hist: SeqFeatures::truncated(&r.hist_seq, c.hist_cap),
            ad: SeqFeatures::truncated(&r.ad_seq, c.ad_cap),
        };
        f.validate(c)?;
        Ok(f)
    }

    pub fn seq(&self, kind: SeqKind) -> &SeqFeatures {
        match kind {
            SeqKind::Hist => &self.hist,
            SeqKind::Ad => &self.ad,
        }
    }

    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        if self.profile_cat.len() != c.profile_cardinalities.len() {
            return Err(Error::Input(format!(
                "`profile_cat` has {} entries, expected {}",
                self.profile_cat.len(),
                c.profile_cardinalities.len()
            )));
        }
        for (i, (&v, &card)) in self.profile_cat.iter().zip(&c.profile_cardinalities).enumerate() {
            if v as usize >= card {
                return Err(Error::Input(format!(
                    "`profile_cat[{i}]` = {v} is outside its cardinality {card}"
                )));
            }
        }
        if self.profile_dense.len() != c.profile_dense_dim {
            return Err(Error::Input(format!(
                "`profile_dense` has {} entries, expected {}",
                self.profile_dense.len(),
                c.profile_dense_dim
            )));
        }
        if !self.profile_dense.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("`profile_dense` contains a non-finite value".into()));
        }
        self.hist.check("hist_seq", c.vocab_size)?;
        self.ad.check("ad_seq", c.vocab_size)
    }
}

/// Onboarding days, exactly `D` of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContentFeatures {
    pub days: Vec<SeqFeatures>,
}

impl ContentFeatures {
    pub fn from_days(days: &[Vec<u32>], c: &ModelConfig) -> Result<Self> {
        if days.len() > c.n_days {
            return Err(Error::Input(format!(
                "`onboarding` has {} days, expected at most {}",
                days.len(),
                c.n_days
            )));
        }
        let mut out: Vec<SeqFeatures> =
            days.iter().map(|d| SeqFeatures::truncated(d, c.day_cap)).collect();
        out.resize(c.n_days, SeqFeatures::default());
        let f = ContentFeatures { days: out };
        f.validate(c)?;
        Ok(f)
    }

    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        if self.days.len() != c.n_days {
            return Err(Error::Contract(format!(
                "content has {} days, the model expects {}",
                self.days.len(),
                c.n_days
            )));
        }
        for (d, day) in self.days.iter().enumerate() {
            day.check(&format!("onboarding[{d}]"), c.vocab_size)?;
        }
        Ok(())
    }
}

/// A training or evaluation example with everything resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRecord {
    pub user_id: u64,
    pub obs: ObservableFeatures,
    pub content: Option<ContentFeatures>,
    /// Soft targets in task order; empty when labels are absent.
    pub targets: Vec<f64>,
    /// Binary relevance in task order.
    pub positives: Vec<bool>,
}

impl PreparedRecord {
    /// Prepares a full record, keeping its onboarding content and labels.
    pub fn from_record(r: &UserJourneyRecord, c: &ModelConfig) -> Result<Self> {
        let mut p = Self::observable_only(r, c)?;
        p.content = Some(ContentFeatures::from_days(&r.onboarding, c)?);
        Ok(p)
    }

    /// Prepares a record without its onboarding content; labels are kept for scoring.
    pub fn observable_only(r: &UserJourneyRecord, c: &ModelConfig) -> Result<Self> {
        let obs = ObservableFeatures::from_observable(&r.observable(), c)?;
        let mut targets = Vec::with_capacity(c.tasks.len());
        let mut positives = Vec::with_capacity(c.tasks.len());
        for t in &c.tasks {
            let y = r.label(&t.name).ok_or_else(|| {
                Error::Input(format!("record of user {} lacks label `{}`", r.user_id, t.name))
            })?;
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::Input(format!(
                    "label `{}` = {y} of user {} is outside [0, 1]",
                    t.name, r.user_id
                )));
            }
            targets.push(y);
            positives.push(r.is_positive(&t.name));
        }
        Ok(PreparedRecord {
            user_id: r.user_id,
            obs,
            content: None,
            targets,
            positives,
        })
    }

    pub fn require_content(&self) -> Result<&ContentFeatures> {
        self.content.as_ref().ok_or_else(|| {
            Error::Input(format!("record of user {} has no onboarding content", self.user_id))
        })
    }
}
