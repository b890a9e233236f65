//! Run configuration: flat `key = value` text files with strict parsing.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. CLI flags override file values through [`RunConfig::set`] with
//! the same key names.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Corpus.
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub clusters: usize,
    pub chains: usize,
    pub chain_prob: f64,
    pub leak_next: f64,
    pub leak_back: f64,
    pub geometry_pull: f64,
    pub noise: f64,
    pub raw_dim: usize,

    // Model dimensions.
    pub dim: usize,
    pub student_dim: usize,
    pub tokens: usize,
    pub encoder_hidden: usize,
    pub head_dim: usize,

    // Teacher.
    pub teacher_raw_dim: usize,
    pub teacher_dim: usize,
    pub teacher_parts: usize,
    pub teacher_part_scale: f64,
    pub teacher_noise: f64,

    // Loss.
    pub order: usize,
    pub mu_d: f64,
    pub rho: f64,
    pub tau_init: f64,

    // Optimisation.
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,

    // Sweep.
    pub orders: Vec<usize>,
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_size: 2000,
            heldout_size: 256,
            clusters: 8,
            chains: 2,
            chain_prob: 0.75,
            leak_next: 0.5,
            leak_back: 0.5,
            geometry_pull: 0.35,
            noise: 0.1,
            raw_dim: 32,
            dim: 32,
            student_dim: 8,
            tokens: 16,
            encoder_hidden: 32,
            head_dim: 32,
            teacher_raw_dim: 16,
            teacher_dim: 8,
            teacher_parts: 3,
            teacher_part_scale: 1.0,
            teacher_noise: 0.05,
            order: 3,
            mu_d: 0.5,
            rho: 0.5,
            tau_init: 0.07,
            batch_size: 32,
            epochs: 20,
            peak_lr: 5e-4,
            warmup_frac: 0.05,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.98,
            orders: vec![0, 1, 2, 3],
            seeds: 5,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected number, got `{v}`")))
}

fn parse_order_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let orders: Vec<usize> = v
        .split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect::<Result<_>>()?;
    if orders.is_empty() {
        return Err(Error::Config(format!("key `{key}`: empty order list")));
    }
    Ok(orders)
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "corpus_size" => self.corpus_size = parse_usize(key, v)?,
            "heldout_size" => self.heldout_size = parse_usize(key, v)?,
            "clusters" => self.clusters = parse_usize(key, v)?,
            "chains" => self.chains = parse_usize(key, v)?,
            "chain_prob" => self.chain_prob = parse_f64(key, v)?,
            "leak_next" => self.leak_next = parse_f64(key, v)?,
            "leak_back" => self.leak_back = parse_f64(key, v)?,
            "geometry_pull" => self.geometry_pull = parse_f64(key, v)?,
            "noise" => self.noise = parse_f64(key, v)?,
            "raw_dim" => self.raw_dim = parse_usize(key, v)?,
            "dim" => self.dim = parse_usize(key, v)?,
            "student_dim" => self.student_dim = parse_usize(key, v)?,
            "tokens" => self.tokens = parse_usize(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_usize(key, v)?,
            "head_dim" => self.head_dim = parse_usize(key, v)?,
            "teacher_raw_dim" => self.teacher_raw_dim = parse_usize(key, v)?,
            "teacher_dim" => self.teacher_dim = parse_usize(key, v)?,
            "teacher_parts" => self.teacher_parts = parse_usize(key, v)?,
            "teacher_part_scale" => self.teacher_part_scale = parse_f64(key, v)?,
            "teacher_noise" => self.teacher_noise = parse_f64(key, v)?,
            "order" => self.order = parse_usize(key, v)?,
            "mu_d" => self.mu_d = parse_f64(key, v)?,
            "rho" => self.rho = parse_f64(key, v)?,
            "tau_init" => self.tau_init = parse_f64(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "peak_lr" => self.peak_lr = parse_f64(key, v)?,
            "warmup_frac" => self.warmup_frac = parse_f64(key, v)?,
            "weight_decay" => self.weight_decay = parse_f64(key, v)?,
            "beta1" => self.beta1 = parse_f64(key, v)?,
            "beta2" => self.beta2 = parse_f64(key, v)?,
            "orders" => self.orders = parse_order_list(key, v)?,
            "seeds" => self.seeds = parse_usize(key, v)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parses a whole config file body. Blank lines and `#` comments are
    /// allowed; every other line must be `key = value`.
    pub fn parse(body: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            config.set(key.trim(), value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Self::parse(&body)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 3 {
            return Err(Error::Config(format!(
                "clusters must be at least 3 to plant triples, got {}",
                self.clusters
            )));
        }
        let needed = if self.chains == 0 {
            0
        } else {
            // Chains pair up around shared middles: each pair uses one middle
            // and four distinct ends.
            self.chains.div_ceil(2) + 2 * self.chains
        };
        if needed > self.clusters {
            return Err(Error::Config(format!(
                "{} chains need at least {} clusters, got {}",
                self.chains, needed, self.clusters
            )));
        }
        if self.corpus_size <= self.heldout_size {
            return Err(Error::Config(format!(
                "corpus_size {} must exceed heldout_size {}",
                self.corpus_size, self.heldout_size
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let min_batch = if self.chains > 0 { 5 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size {} too small for chain co-sampling",
                self.batch_size
            )));
        }
        if self.tokens < 8 {
            return Err(Error::Config(format!(
                "tokens {} below the pyramid minimum of 8",
                self.tokens
            )));
        }
        if !(0.0..=1.0).contains(&self.chain_prob) {
            return Err(Error::Config(format!(
                "chain_prob {} outside [0, 1]",
                self.chain_prob
            )));
        }
        if self.tau_init <= 0.0 {
            return Err(Error::Config(format!(
                "tau_init must be positive, got {}",
                self.tau_init
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.teacher_dim > self.teacher_raw_dim {
            return Err(Error::Config(format!(
                "teacher_dim {} exceeds teacher_raw_dim {}",
                self.teacher_dim, self.teacher_raw_dim
            )));
        }
        if self.teacher_parts < 2 || self.teacher_parts > self.tokens {
            return Err(Error::Config(format!(
                "teacher_parts {} outside 2..=tokens ({})",
                self.teacher_parts, self.tokens
            )));
        }
        if self.orders.is_empty() {
            return Err(Error::Config("orders list is empty".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// The config serialised back to the flat text format, keys in a fixed
    /// order.
    pub fn to_text(&self) -> String {
        let orders = self
            .orders
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "corpus_size = {}\nheldout_size = {}\nclusters = {}\nchains = {}\nchain_prob = {}\nleak_next = {}\nleak_back = {}\ngeometry_pull = {}\nnoise = {}\nraw_dim = {}\ndim = {}\nstudent_dim = {}\ntokens = {}\nencoder_hidden = {}\nhead_dim = {}\nteacher_raw_dim = {}\nteacher_dim = {}\nteacher_parts = {}\nteacher_part_scale = {}\nteacher_noise = {}\norder = {}\nmu_d = {}\nrho = {}\ntau_init = {}\nbatch_size = {}\nepochs = {}\npeak_lr = {}\nwarmup_frac = {}\nweight_decay = {}\nbeta1 = {}\nbeta2 = {}\norders = {}\nseeds = {}\n",
            self.corpus_size,
            self.heldout_size,
            self.clusters,
            self.chains,
            self.chain_prob,
            self.leak_next,
            self.leak_back,
            self.geometry_pull,
            self.noise,
            self.raw_dim,
            self.dim,
            self.student_dim,
            self.tokens,
            self.encoder_hidden,
            self.head_dim,
            self.teacher_raw_dim,
            self.teacher_dim,
            self.teacher_parts,
            self.teacher_part_scale,
            self.teacher_noise,
            self.order,
            self.mu_d,
            self.rho,
            self.tau_init,
            self.batch_size,
            self.epochs,
            self.peak_lr,
            self.warmup_frac,
            self.weight_decay,
            self.beta1,
            self.beta2,
            orders,
            self.seeds,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("florble = 3\n").unwrap_err();
        assert!(err.to_string().contains("florble"));
    }

    #[test]
    fn parse_round_trip() {
        let config = RunConfig::default();
        let parsed = RunConfig::parse(&config.to_text()).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let body = "# comment\n\nbatch_size = 16\n";
        let config = RunConfig::parse(body).unwrap();
        assert_eq!(config.batch_size, 16);
    }

    #[test]
    fn malformed_lines_error() {
        assert!(RunConfig::parse("batch_size 16\n").is_err());
        assert!(RunConfig::parse("batch_size = frog\n").is_err());
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut c = RunConfig::default();
        c.clusters = 2;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.heldout_size = c.corpus_size;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.tokens = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn orders_list_parses() {
        let mut c = RunConfig::default();
        c.set("orders", "0, 1,2,3").unwrap();
        assert_eq!(c.orders, vec![0, 1, 2, 3]);
        assert!(c.set("orders", "").is_err());
    }
}
