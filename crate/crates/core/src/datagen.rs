//! Synthetic conversion journeys with a planted retention mechanism.
//!
//! Each user has a latent topic preference `z` and a stickiness level. At
//! bid time only a noisy copy of `z`, coarse buckets and two behaviour
//! sequences are observable. After conversion the user consumes content
//! drawn from a mix of `z` and an exogenous per-calendar-day trend; the
//! chance of coming back on the next day rises with how well the last
//! active day's content matched `z`. The labels count active days in a
//! window that starts after the horizon, so onboarding days `1..=d` carry
//! information about `LT_d` without containing it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::math::sigmoid;
use crate::task::TaskSpec;

/// Stream id reserved for world-level draws (catalog order, trends).
const WORLD_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Item vocabulary size.
    #[serde(rename = "V")]
    pub vocab_size: usize,
    /// Number of content topics.
    #[serde(rename = "T")]
    pub n_topics: usize,
    /// Recorded onboarding days.
    #[serde(rename = "D")]
    pub n_days: usize,
    /// Maximum recorded interactions per onboarding day.
    #[serde(rename = "N")]
    pub day_cap: usize,
    #[serde(rename = "L_h")]
    pub hist_len: usize,
    #[serde(rename = "L_a")]
    pub ad_len: usize,
    /// Weight of the user's own preference (vs. the exogenous trend) in onboarding draws.
    pub alpha: f64,
    pub profile_noise: f64,
    pub kappa0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    /// Inclusive range of conversion events per user.
    pub events_per_user: [usize; 2],
    pub n_users: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    /// Symmetric Dirichlet concentration of `z`.
    pub preference_concentration: f64,
    /// Beta parameters of stickiness before quantization.
    pub stickiness_beta: [f64; 2],
    pub stickiness_levels: usize,
    pub entropy_buckets: usize,
    /// Probability a history item follows `z` rather than a uniform topic.
    pub hist_preference_mix: f64,
    /// Probability an ad item follows `z` rather than global popularity.
    pub ad_preference_mix: f64,
    pub popularity_exponent: f64,
    pub trend_concentration: f64,
    /// Length of the shared calendar of daily trends.
    pub trend_days: usize,
    /// Minimum interactions on an active day (the maximum is `N`).
    pub min_day_items: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab_size: 200,
            n_topics: 8,
            n_days: 7,
            day_cap: 16,
            hist_len: 64,
            ad_len: 16,
            alpha: 0.85,
            profile_noise: 0.15,
            kappa0: -7.5,
            kappa1: 16.0,
            kappa2: 1.0,
            events_per_user: [2, 4],
            n_users: 30_000,
            test_fraction: 0.2,
            seed: 7,
            tasks: TaskSpec::defaults(),
            preference_concentration: 0.4,
            stickiness_beta: [2.0, 2.0],
            stickiness_levels: 4,
            entropy_buckets: 3,
            hist_preference_mix: 0.3,
            ad_preference_mix: 0.25,
            popularity_exponent: 1.0,
            trend_concentration: 0.5,
            trend_days: 64,
            min_day_items: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(Error::Config(alloc::format!("`{field}` {msg}")));
        if self.n_topics < 2 {
            return err("T", "must be at least 2");
        }
        if self.vocab_size < self.n_topics {
            return err("V", "must be at least T (every topic needs an item)");
        }
        if self.n_days == 0 {
            return err("D", "must be at least 1");
        }
        if self.day_cap == 0 {
            return err("N", "must be at least 1");
        }
        if self.hist_len == 0 {
            return err("L_h", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(alloc::format!(
                "`alpha` = {} is outside its range [0, 1]",
                self.alpha
            )));
        }
        if !(self.profile_noise >= 0.0) || !self.profile_noise.is_finite() {
            return err("profile_noise", "must be a finite value >= 0");
        }
        for (name, v) in [("kappa0", self.kappa0), ("kappa1", self.kappa1), ("kappa2", self.kappa2)] {
            if !v.is_finite() {
                return err(name, "must be finite");
            }
        }
        if self.kappa1 < 0.0 {
            return err("kappa1", "must be >= 0 (content match can only raise retention)");
        }
        let [lo, hi] = self.events_per_user;
        if lo == 0 || lo > hi {
            return err("events_per_user", "must be a range [min, max] with 1 <= min <= max");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return err("test_fraction", "must lie strictly between 0 and 1");
        }
        if self.tasks.is_empty() {
            return err("tasks", "must list at least one task");
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.tasks.len() {
            return err("tasks", "has duplicate task names");
        }
        for t in &self.tasks {
            if t.horizon == 0 || t.horizon > self.n_days {
                return Err(Error::Config(alloc::format!(
                    "task `{}` has horizon {} but D = {}",
                    t.name,
                    t.horizon,
                    self.n_days
                )));
            }
        }
        if !(self.preference_concentration > 0.0) {
            return err("preference_concentration", "must be > 0");
        }
        if !(self.trend_concentration > 0.0) {
            return err("trend_concentration", "must be > 0");
        }
        if !(self.stickiness_beta[0] > 0.0 && self.stickiness_beta[1] > 0.0) {
            return err("stickiness_beta", "parameters must be > 0");
        }
        if self.stickiness_levels == 0 {
            return err("stickiness_levels", "must be at least 1");
        }
        if self.entropy_buckets == 0 {
            return err("entropy_buckets", "must be at least 1");
        }
        for (name, v) in [
            ("hist_preference_mix", self.hist_preference_mix),
            ("ad_preference_mix", self.ad_preference_mix),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(name, "must lie in [0, 1]");
            }
        }
        if self.min_day_items == 0 || self.min_day_items > self.day_cap {
            return err("min_day_items", "must lie in [1, N]");
        }
        if self.trend_days < self.simulated_days() {
            return err("trend_days", "must cover at least the simulated days (2 x longest horizon)");
        }
        Ok(())
    }

    pub fn max_horizon(&self) -> usize {
        self.tasks.iter().map(|t| t.horizon).max().unwrap_or(1)
    }

    /// Days of activity simulated per event.
    pub fn simulated_days(&self) -> usize {
        (2 * self.max_horizon()).max(self.n_days)
    }

    /// Cardinalities of `profile_cat`: dominant topic, entropy bucket, stickiness level.
    pub fn profile_cardinalities(&self) -> Vec<usize> {
        vec![self.n_topics, self.entropy_buckets, self.stickiness_levels]
    }

    pub fn hash(&self) -> String {
        fingerprint(self)
    }

    fn split_sizes(&self) -> Result<(usize, usize)> {
        let n_test = libm::round(self.n_users as f64 * self.test_fraction) as usize;
        let n_train = self.n_users.saturating_sub(n_test);
        if n_train == 0 || n_test == 0 {
            return Err(Error::Config(alloc::format!(
                "`n_users` = {} is too small for test_fraction {}",
                self.n_users,
                self.test_fraction
            )));
        }
        Ok((n_train, n_test))
    }
}

/// The item space.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    /// Topic of every item id.
    pub item_topic: Vec<u32>,
    /// Items of every topic, ascending.
    pub topic_items: Vec<Vec<u32>>,
    /// Cumulative global popularity over item ids.
    popularity_cdf: Vec<f64>,
}

impl Catalog {
    pub fn vocab_size(&self) -> usize {
        self.item_topic.len()
    }

    pub fn n_topics(&self) -> usize {
        self.topic_items.len()
    }

    pub fn topic_of(&self, item: u32) -> usize {
        self.item_topic[item as usize] as usize
    }

    /// Topics are one-hot vectors.
    pub fn topic_vector(&self, topic: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_topics()];
        v[topic] = 1.0;
        v
    }

    pub fn contains(&self, item: u32) -> bool {
        (item as usize) < self.item_topic.len()
    }

    fn uniform_item_of<R: Rng>(&self, topic: usize, rng: &mut R) -> u32 {
        let items = &self.topic_items[topic];
        items[rng.random_range(0..items.len())]
    }

    fn popular_item<R: Rng>(&self, rng: &mut R) -> u32 {
        let u = rng.random::<f64>() * self.popularity_cdf[self.popularity_cdf.len() - 1];
        let i = self.popularity_cdf.partition_point(|c| *c <= u);
        i.min(self.popularity_cdf.len() - 1) as u32
    }
}

/// Builds the catalog: a seeded shuffle of a round-robin topic assignment,
/// so topic sizes differ by at most one.
pub fn build_catalog(config: &GenConfig, seed: u64) -> Result<Catalog> {
    if config.n_topics < 2 {
        return Err(Error::Config("`T` must be at least 2".into()));
    }
    if config.vocab_size < config.n_topics {
        return Err(Error::Config(alloc::format!(
            "`V` = {} is smaller than `T` = {}",
            config.vocab_size,
            config.n_topics
        )));
    }
    let mut rng = world_rng(seed);
    let v = config.vocab_size;
    let mut item_topic: Vec<u32> = (0..v).map(|i| (i % config.n_topics) as u32).collect();
    shuffle(&mut item_topic, &mut rng);
    let mut topic_items = vec![Vec::new(); config.n_topics];
    for (item, t) in item_topic.iter().enumerate() {
        topic_items[*t as usize].push(item as u32);
    }
    // Zipf popularity over a random ranking of items
    let mut rank: Vec<usize> = (0..v).collect();
    shuffle(&mut rank, &mut rng);
    let mut weights = vec![0.0; v];
    for (r, item) in rank.iter().enumerate() {
        weights[*item] = 1.0 / libm::pow(r as f64 + 1.0, config.popularity_exponent);
    }
    let mut acc = 0.0;
    let popularity_cdf = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    Ok(Catalog {
        item_topic,
        topic_items,
        popularity_cdf,
    })
}

fn shuffle<T, R: Rng>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

fn world_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(WORLD_STREAM);
    rng
}

/// The rng stream owned by one user.
pub fn user_rng(seed: u64, user_id: u64) -> ChaCha8Rng {
    assert_ne!(user_id, WORLD_STREAM, "user id collides with the world stream");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user_id);
    rng
}

/// One conversion event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserJourneyRecord {
    pub user_id: u64,
    /// Dominant-topic bucket, entropy bucket, activity bucket.
    pub profile_cat: Vec<u32>,
    pub profile_dense: Vec<f64>,
    pub hist_seq: Vec<u32>,
    pub ad_seq: Vec<u32>,
    /// One entry per onboarding day; day 1 is the conversion day.
    pub onboarding: Vec<Vec<u32>>,
    pub labels: BTreeMap<String, f64>,
    pub label_counts: BTreeMap<String, u32>,
}

/// The bid-time view of a record: no onboarding content, no labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableRecord {
    pub user_id: u64,
    pub profile_cat: Vec<u32>,
    pub profile_dense: Vec<f64>,
    pub hist_seq: Vec<u32>,
    pub ad_seq: Vec<u32>,
}

impl UserJourneyRecord {
    pub fn observable(&self) -> ObservableRecord {
        ObservableRecord {
            user_id: self.user_id,
            profile_cat: self.profile_cat.clone(),
            profile_dense: self.profile_dense.clone(),
            hist_seq: self.hist_seq.clone(),
            ad_seq: self.ad_seq.clone(),
        }
    }

    /// Binary relevance used by the ranking metrics: any revisit in the window.
    pub fn is_positive(&self, task: &str) -> bool {
        self.label_counts.get(task).copied().unwrap_or(0) > 0
    }

    pub fn label(&self, task: &str) -> Option<f64> {
        self.labels.get(task).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<UserJourneyRecord>,
    pub split_tag: Split,
    pub gen_config_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn user_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.user_id).collect();
        ids.dedup();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Latent state of a user; never stored in records.
#[derive(Clone, Debug, PartialEq)]
pub struct UserLatents {
    pub preference: Vec<f64>,
    pub stickiness_level: usize,
    pub stickiness: f64,
}

/// Everything shared across users: config, catalog and the trend calendar.
#[derive(Clone, Debug)]
pub struct World {
    pub config: GenConfig,
    pub catalog: Catalog,
    /// Topic distribution of every calendar day.
    pub trends: Vec<Vec<f64>>,
}

impl World {
    pub fn new(config: &GenConfig) -> Result<World> {
        config.validate()?;
        let catalog = build_catalog(config, config.seed)?;
        // trends use a stream distinct from the catalog draws
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_656e_6473);
        rng.set_stream(WORLD_STREAM);
        let trends = trend_calendar(config, &mut rng);
        Ok(World {
            config: config.clone(),
            catalog,
            trends,
        })
    }
}

/// Daily trends in blocks of `T` days. Each block takes one Dirichlet draw
/// and assigns its components to topics through a random Latin square, so
/// every day is marginally Dirichlet while each topic's mean over a block is
/// exactly `1/T`. Without this, the calendar mean favours some topics and
/// expected content match depends on `z` even at `alpha = 0`.
fn trend_calendar<R: Rng>(config: &GenConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let t = config.n_topics;
    let mut out = Vec::with_capacity(config.trend_days);
    while out.len() < config.trend_days {
        let v = dirichlet(t, config.trend_concentration, rng);
        let mut rows: Vec<usize> = (0..t).collect();
        let mut cols: Vec<usize> = (0..t).collect();
        rows.shuffle(rng);
        cols.shuffle(rng);
        for &r in rows.iter().take(config.trend_days - out.len()) {
            out.push(cols.iter().map(|&c| v[(r + c) % t]).collect());
        }
    }
    out
}

/// Symmetric Dirichlet draw through normalized Gamma variates.
pub fn dirichlet<R: Rng>(dim: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma shape");
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn normalized_entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|x| **x > 0.0)
        .map(|x| -x * libm::log(*x))
        .sum();
    h / libm::log(p.len() as f64)
}

/// Draws the latent state; the first draws of every user stream.
pub fn sample_latents<R: Rng>(config: &GenConfig, rng: &mut R) -> UserLatents {
    let preference = dirichlet(config.n_topics, config.preference_concentration, rng);
    let beta = Beta::new(config.stickiness_beta[0], config.stickiness_beta[1]).expect("valid beta");
    let levels = config.stickiness_levels;
    let raw: f64 = beta.sample(rng);
    let stickiness_level = ((raw * levels as f64) as usize).min(levels - 1);
    let stickiness = (stickiness_level as f64 + 0.5) / levels as f64;
    UserLatents {
        preference,
        stickiness_level,
        stickiness,
    }
}

/// Recomputes a user's latent state from the generator seed (white-box access).
pub fn user_latents(config: &GenConfig, user_id: u64) -> UserLatents {
    sample_latents(config, &mut user_rng(config.seed, user_id))
}

/// Mean preference mass on the topics of `items`.
pub fn content_match(preference: &[f64], items: &[u32], catalog: &Catalog) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let s: f64 = items.iter().map(|i| preference[catalog.topic_of(*i)]).sum();
    s / items.len() as f64
}

/// Probability of activity on a day following a day with content match `last_match`.
pub fn revisit_probability(config: &GenConfig, last_match: f64, stickiness: f64) -> f64 {
    sigmoid(config.kappa0 + config.kappa1 * last_match + config.kappa2 * stickiness)
}

fn draw_day_items<R: Rng>(
    world: &World,
    preference: &[f64],
    trend: &[f64],
    rng: &mut R,
) -> Vec<u32> {
    let cfg = &world.config;
    let n = rng.random_range(cfg.min_day_items..=cfg.day_cap);
    (0..n)
        .map(|_| {
            let topic = if rng.random::<f64>() < cfg.alpha {
                categorical(preference, rng)
            } else {
                categorical(trend, rng)
            };
            world.catalog.uniform_item_of(topic, rng)
        })
        .collect()
}

/// All conversion events of one user, drawn from `rng` (the user's own stream).
pub fn sample_user_journey<R: Rng>(world: &World, user_id: u64, rng: &mut R) -> Vec<UserJourneyRecord> {
    let cfg = &world.config;
    let catalog = &world.catalog;
    let latents = sample_latents(cfg, rng);
    let z = &latents.preference;
    let dominant = z
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if *p > best.1 { (i, *p) } else { best })
        .0;
    let entropy_bucket =
        ((normalized_entropy(z) * cfg.entropy_buckets as f64) as usize).min(cfg.entropy_buckets - 1);
    let noise = Normal::new(0.0, cfg.profile_noise).expect("valid noise std");
    let sim_days = cfg.simulated_days();

    let n_events = rng.random_range(cfg.events_per_user[0]..=cfg.events_per_user[1]);
    let mut out = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let profile_dense: Vec<f64> = z.iter().map(|p| p + noise.sample(rng)).collect();

        let hist_n = rng.random_range((cfg.hist_len / 4).max(1)..=cfg.hist_len);
        let hist_seq = (0..hist_n)
            .map(|_| {
                let topic = if rng.random::<f64>() < cfg.hist_preference_mix {
                    categorical(z, rng)
                } else {
                    rng.random_range(0..cfg.n_topics)
                };
                catalog.uniform_item_of(topic, rng)
            })
            .collect();

        let ad_n = rng.random_range(0..=cfg.ad_len);
        let ad_seq = (0..ad_n)
            .map(|_| {
                if rng.random::<f64>() < cfg.ad_preference_mix {
                    let topic = categorical(z, rng);
                    catalog.uniform_item_of(topic, rng)
                } else {
                    catalog.popular_item(rng)
                }
            })
            .collect();

        let start = rng.random_range(0..=world.trends.len() - sim_days);
        let mut active = vec![false; sim_days];
        let mut onboarding = vec![Vec::new(); cfg.n_days];
        let mut last_match = 0.0;
        for day in 0..sim_days {
            active[day] = if day == 0 {
                true
            } else {
                rng.random::<f64>() < revisit_probability(cfg, last_match, latents.stickiness)
            };
            if active[day] {
                let items = draw_day_items(world, z, &world.trends[start + day], rng);
                last_match = content_match(z, &items, catalog);
                if day < cfg.n_days {
                    onboarding[day] = items;
                }
            }
        }

        let mut labels = BTreeMap::new();
        let mut label_counts = BTreeMap::new();
        for task in &cfg.tasks {
            let d = task.horizon;
            let count = active[d..2 * d].iter().filter(|a| **a).count() as u32;
            label_counts.insert(task.name.clone(), count);
            labels.insert(task.name.clone(), count as f64 / d as f64);
        }

        out.push(UserJourneyRecord {
            user_id,
            profile_cat: vec![dominant as u32, entropy_bucket as u32, latents.stickiness_level as u32],
            profile_dense,
            hist_seq,
            ad_seq,
            onboarding,
            labels,
            label_counts,
        });
    }
    out
}

/// Journeys of a single user from its own stream.
pub fn generate_user(world: &World, user_id: u64) -> Vec<UserJourneyRecord> {
    sample_user_journey(world, user_id, &mut user_rng(world.config.seed, user_id))
}

/// User ids of the train and test splits: the first users train, the rest test.
pub fn split_user_ids(config: &GenConfig) -> Result<(core::ops::Range<u64>, core::ops::Range<u64>)> {
    let (n_train, n_test) = config.split_sizes()?;
    let n_train = n_train as u64;
    Ok((0..n_train, n_train..n_train + n_test as u64))
}

/// Generates both splits serially.
pub fn generate_dataset(config: &GenConfig) -> Result<(Dataset, Dataset)> {
    let world = World::new(config)?;
    let (train_ids, test_ids) = split_user_ids(config)?;
    let hash = config.hash();
    let build = |ids: core::ops::Range<u64>, split| Dataset {
        records: ids.flat_map(|u| generate_user(&world, u)).collect(),
        split_tag: split,
        gen_config_hash: hash.clone(),
    };
    Ok((build(train_ids, Split::Train), build(test_ids, Split::Test)))
}

/// Monte-Carlo estimate of `E[label_t | z, stickiness, onboarding days 1..=d]`
/// per task, replaying the activity recurrence with the true latent state.
///
/// Future trends are unknown to the oracle and drawn from their prior.
/// Each step adds the revisit probability rather than the sampled
/// indicator, which lowers the variance without biasing the estimate.
pub fn oracle_score(
    record: &UserJourneyRecord,
    world: &World,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    if n_mc < 1 {
        return Err(Error::Config("`n_mc` must be at least 1".into()));
    }
    let cfg = &world.config;
    let latents = user_latents(cfg, record.user_id);
    let z = &latents.preference;
    let mut out = BTreeMap::new();
    for task in &cfg.tasks {
        let d = task.horizon;
        let last_active = (0..d.min(record.onboarding.len()))
            .rev()
            .find(|day| !record.onboarding[*day].is_empty())
            .ok_or_else(|| Error::Input("record has no active onboarding day".to_string()))?;
        let start_match = content_match(z, &record.onboarding[last_active], &world.catalog);
        let mut total = 0.0;
        for _ in 0..n_mc {
            let mut last_match = start_match;
            let mut expected = 0.0;
            for _day in d..2 * d {
                let p = revisit_probability(cfg, last_match, latents.stickiness);
                expected += p;
                if rng.random::<f64>() < p {
                    let trend = dirichlet(cfg.n_topics, cfg.trend_concentration, rng);
                    let items = draw_day_items(world, z, &trend, rng);
                    last_match = content_match(z, &items, &world.catalog);
                }
            }
            total += expected / d as f64;
        }
        out.insert(task.name.clone(), total / n_mc as f64);
    }
    Ok(out)
}

/// Monte-Carlo estimate of `E[label_t | z, stickiness]`: the best score
/// available without onboarding content, given the true latent state.
pub fn bid_time_oracle_score(
    record: &UserJourneyRecord,
    world: &World,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    if n_mc < 1 {
        return Err(Error::Config("`n_mc` must be at least 1".into()));
    }
    let cfg = &world.config;
    let latents = user_latents(cfg, record.user_id);
    let z = &latents.preference;
    let draw_match = |rng: &mut ChaCha8Rng| {
        let trend = dirichlet(cfg.n_topics, cfg.trend_concentration, rng);
        let items = draw_day_items(world, z, &trend, rng);
        content_match(z, &items, &world.catalog)
    };
    let mut out = BTreeMap::new();
    for task in &cfg.tasks {
        let d = task.horizon;
        let mut total = 0.0;
        for _ in 0..n_mc {
            let mut last_match = draw_match(rng);
            let mut expected = 0.0;
            for day in 1..2 * d {
                let p = revisit_probability(cfg, last_match, latents.stickiness);
                if day >= d {
                    expected += p;
                }
                if rng.random::<f64>() < p {
                    last_match = draw_match(rng);
                }
            }
            total += expected / d as f64;
        }
        out.insert(task.name.clone(), total / n_mc as f64);
    }
    Ok(out)
}
