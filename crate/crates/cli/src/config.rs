//! Experiment configuration: a line-based `key = value` format with
//! bracketed sections and `#` comments. Every field has a default, unknown
//! keys are errors, and parse failures carry exact line numbers.

use std::fmt;
use std::path::Path;

use drnm_core::planner::CemConfig;
use drnm_core::triplet::TripletConfig;

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

/// All the knobs of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene_points: usize,
    pub grid_side: u32,
    // matcher / ransac / gate / smooth
    pub noise_px: f64,
    pub outlier_rate: f64,
    pub tau_match: f64,
    pub ransac_threshold_px: f64,
    pub ransac_iterations: usize,
    pub n_min: usize,
    pub n_sat: usize,
    pub tau_rel: f64,
    pub alpha: f64,
    pub tau_temp: f64,
    // rollout experiment
    pub horizon_seconds: Vec<usize>,
    pub steps_per_second: usize,
    pub interval: usize,
    pub history: usize,
    pub rollout_seeds: usize,
    pub sigma_base: f64,
    pub lambda: f64,
    // ablation
    pub ablate_intervals: Vec<usize>,
    pub ablate_seeds: usize,
    pub ablate_horizon: usize,
    // planner
    pub plan_population: usize,
    pub plan_elites: usize,
    pub plan_iterations: usize,
    pub plan_horizon: usize,
    pub plan_init_mean: [f64; 3],
    pub plan_init_std: [f64; 3],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_points: 320,
            grid_side: 14,
            noise_px: 0.0,
            outlier_rate: 0.0,
            tau_match: 0.8,
            ransac_threshold_px: 3.0,
            ransac_iterations: 2000,
            n_min: 16,
            n_sat: 64,
            tau_rel: 0.1,
            alpha: 0.6,
            tau_temp: 0.5,
            horizon_seconds: vec![1, 2, 4, 8, 16],
            steps_per_second: 1,
            interval: 4,
            history: 4,
            rollout_seeds: 50,
            sigma_base: 0.01,
            lambda: 0.5,
            ablate_intervals: vec![1, 2, 3],
            ablate_seeds: 8,
            ablate_horizon: 6,
            plan_population: 32,
            plan_elites: 8,
            plan_iterations: 8,
            plan_horizon: 4,
            plan_init_mean: [0.3, 0.0, 0.0],
            plan_init_std: [0.25, 0.1, 0.05],
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(err(line_no, "unterminated section header"));
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(line_no, format!("expected `key = value`, got {line:?}")));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(0, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        line: usize,
    ) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| err(line, format!("bad {what} value {value:?}")))
        }
        fn parse_list(value: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
            value
                .split(',')
                .map(|v| parse::<usize>(v.trim(), line, "list entry"))
                .collect()
        }
        fn parse_triple(value: &str, line: usize) -> Result<[f64; 3], ConfigError> {
            let parts: Vec<f64> = value
                .split(',')
                .map(|v| parse::<f64>(v.trim(), line, "triple entry"))
                .collect::<Result<_, _>>()?;
            if parts.len() != 3 {
                return Err(err(line, format!("expected 3 values, got {}", parts.len())));
            }
            Ok([parts[0], parts[1], parts[2]])
        }

        match (section, key) {
            ("experiment", "seed") => self.seed = parse(value, line, "seed")?,
            ("scene", "points") => self.scene_points = parse(value, line, "points")?,
            ("grid", "side") => self.grid_side = parse(value, line, "grid side")?,
            ("matcher", "noise_px") => self.noise_px = parse(value, line, "noise_px")?,
            ("matcher", "outlier_rate") => self.outlier_rate = parse(value, line, "outlier_rate")?,
            ("matcher", "tau_match") => self.tau_match = parse(value, line, "tau_match")?,
            ("ransac", "threshold_px") => {
                self.ransac_threshold_px = parse(value, line, "threshold_px")?
            }
            ("ransac", "iterations") => {
                self.ransac_iterations = parse(value, line, "iterations")?
            }
            ("gate", "n_min") => self.n_min = parse(value, line, "n_min")?,
            ("gate", "n_sat") => self.n_sat = parse(value, line, "n_sat")?,
            ("gate", "tau_rel") => self.tau_rel = parse(value, line, "tau_rel")?,
            ("smooth", "alpha") => self.alpha = parse(value, line, "alpha")?,
            ("smooth", "tau_temp") => self.tau_temp = parse(value, line, "tau_temp")?,
            ("rollout", "seconds") => self.horizon_seconds = parse_list(value, line)?,
            ("rollout", "steps_per_second") => {
                self.steps_per_second = parse(value, line, "steps_per_second")?
            }
            ("rollout", "interval") => self.interval = parse(value, line, "interval")?,
            ("rollout", "history") => self.history = parse(value, line, "history")?,
            ("rollout", "seeds") => self.rollout_seeds = parse(value, line, "seeds")?,
            ("rollout", "sigma_base") => self.sigma_base = parse(value, line, "sigma_base")?,
            ("rollout", "lambda") => self.lambda = parse(value, line, "lambda")?,
            ("ablate", "intervals") => self.ablate_intervals = parse_list(value, line)?,
            ("ablate", "seeds") => self.ablate_seeds = parse(value, line, "seeds")?,
            ("ablate", "horizon") => self.ablate_horizon = parse(value, line, "horizon")?,
            ("planner", "population") => self.plan_population = parse(value, line, "population")?,
            ("planner", "elites") => self.plan_elites = parse(value, line, "elites")?,
            ("planner", "iterations") => self.plan_iterations = parse(value, line, "iterations")?,
            ("planner", "horizon") => self.plan_horizon = parse(value, line, "horizon")?,
            ("planner", "init_mean") => self.plan_init_mean = parse_triple(value, line)?,
            ("planner", "init_std") => self.plan_init_std = parse_triple(value, line)?,
            _ => {
                return Err(err(
                    line,
                    format!("unknown key {key:?} in section [{section}]"),
                ));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon_seconds.is_empty() {
            return Err(err(0, "rollout seconds list is empty"));
        }
        if self.horizon_seconds.iter().any(|&h| h == 0) || self.steps_per_second == 0 {
            return Err(err(0, "horizons must be positive"));
        }
        if !self.horizon_seconds.windows(2).all(|w| w[0] < w[1]) {
            return Err(err(0, "rollout seconds must be strictly increasing"));
        }
        if self.interval == 0 || self.history == 0 || self.rollout_seeds == 0 {
            return Err(err(0, "rollout interval, history and seeds must be positive"));
        }
        if self.ablate_intervals.is_empty() || self.ablate_intervals.iter().any(|&i| i == 0) {
            return Err(err(0, "ablation intervals must be positive"));
        }
        if self.ablate_horizon == 0 || self.ablate_seeds == 0 {
            return Err(err(0, "ablation horizon and seeds must be positive"));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(err(0, "outlier_rate must be in [0, 1)"));
        }
        if self.n_sat <= self.n_min {
            return Err(err(0, "gate n_sat must exceed n_min"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(err(0, "smooth alpha must be in [0, 1)"));
        }
        if self.grid_side == 0 || 224 % self.grid_side != 0 {
            return Err(err(0, "grid side must divide 224"));
        }
        if self.plan_elites == 0 || self.plan_elites > self.plan_population {
            return Err(err(0, "planner elites must be in 1..=population"));
        }
        if self.plan_horizon == 0 || self.plan_iterations == 0 {
            return Err(err(0, "planner horizon and iterations must be positive"));
        }
        if self.plan_init_std.iter().any(|&s| s <= 0.0) {
            return Err(err(0, "planner init_std must be positive"));
        }
        Ok(())
    }

    /// Horizon step marks: seconds * steps_per_second, ascending.
    pub fn horizon_steps(&self) -> Vec<usize> {
        self.horizon_seconds
            .iter()
            .map(|&s| s * self.steps_per_second)
            .collect()
    }

    pub fn max_horizon(&self) -> usize {
        *self.horizon_steps().last().expect("validated nonempty")
    }

    pub fn triplet_config(&self) -> TripletConfig {
        let mut t = TripletConfig::default();
        t.matcher.noise_px = self.noise_px;
        t.matcher.outlier_rate = self.outlier_rate;
        t.matcher.tau_match = self.tau_match;
        t.ransac.threshold_px = self.ransac_threshold_px;
        t.ransac.iterations = self.ransac_iterations;
        t.gate.n_min = self.n_min;
        t.gate.n_sat = self.n_sat;
        t.gate.tau_rel = self.tau_rel;
        t.smooth.alpha = self.alpha;
        t.smooth.tau_temp = self.tau_temp;
        t
    }

    pub fn cem_config(&self, seed: u64) -> CemConfig {
        CemConfig {
            population: self.plan_population,
            elites: self.plan_elites,
            iterations: self.plan_iterations,
            horizon: self.plan_horizon,
            init_mean: self.plan_init_mean,
            init_std: self.plan_init_std,
            std_floor: 1e-3,
            seed,
        }
    }

    /// Canonical text form; hashing this pins the full configuration.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let triple = |v: &[f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!(
            "[experiment]\nseed = {}\n\n[scene]\npoints = {}\n\n[grid]\nside = {}\n\n\
             [matcher]\nnoise_px = {}\noutlier_rate = {}\ntau_match = {}\n\n\
             [ransac]\nthreshold_px = {}\niterations = {}\n\n\
             [gate]\nn_min = {}\nn_sat = {}\ntau_rel = {}\n\n\
             [smooth]\nalpha = {}\ntau_temp = {}\n\n\
             [rollout]\nseconds = {}\nsteps_per_second = {}\ninterval = {}\nhistory = {}\nseeds = {}\nsigma_base = {}\nlambda = {}\n\n\
             [ablate]\nintervals = {}\nseeds = {}\nhorizon = {}\n\n\
             [planner]\npopulation = {}\nelites = {}\niterations = {}\nhorizon = {}\ninit_mean = {}\ninit_std = {}\n",
            self.seed,
            self.scene_points,
            self.grid_side,
            self.noise_px,
            self.outlier_rate,
            self.tau_match,
            self.ransac_threshold_px,
            self.ransac_iterations,
            self.n_min,
            self.n_sat,
            self.tau_rel,
            self.alpha,
            self.tau_temp,
            list(&self.horizon_seconds),
            self.steps_per_second,
            self.interval,
            self.history,
            self.rollout_seeds,
            self.sigma_base,
            self.lambda,
            list(&self.ablate_intervals),
            self.ablate_seeds,
            self.ablate_horizon,
            self.plan_population,
            self.plan_elites,
            self.plan_iterations,
            self.plan_horizon,
            triple(&self.plan_init_mean),
            triple(&self.plan_init_std),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn sections_and_overrides() {
        let text = "\
# comment
[experiment]
seed = 42

[rollout]
seconds = 1,2,4
interval = 3
seeds = 5   # inline comment

[planner]
init_std = 0.3, 0.2, 0.1
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.horizon_seconds, vec![1, 2, 4]);
        assert_eq!(cfg.interval, 3);
        assert_eq!(cfg.rollout_seeds, 5);
        assert_eq!(cfg.plan_init_std, [0.3, 0.2, 0.1]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[experiment]\nseed = 1\nbogus_key = 3\n";
        let e = ExperimentConfig::parse(text).unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("bogus_key"));

        let e = ExperimentConfig::parse("[rollout]\nseeds = many\n").unwrap_err();
        assert_eq!(e.line, 2);

        let e = ExperimentConfig::parse("not a key value line\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn validation_rejects_bad_combinations() {
        assert!(ExperimentConfig::parse("[gate]\nn_min = 64\nn_sat = 16\n").is_err());
        assert!(ExperimentConfig::parse("[rollout]\nseconds = 4,2\n").is_err());
        assert!(ExperimentConfig::parse("[grid]\nside = 13\n").is_err());
        assert!(ExperimentConfig::parse("[planner]\nelites = 0\n").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 9;
        cfg.noise_px = 0.25;
        cfg.horizon_seconds = vec![1, 3, 9];
        let parsed = ExperimentConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
    }
}
