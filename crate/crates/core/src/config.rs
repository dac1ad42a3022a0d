//! Pipeline hyperparameters and the flat `key = value` config format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every tunable of the pipeline. Defaults follow the MultiOrgan setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Color-vs-distance balance for k-means features.
    pub lambda: f64,
    /// Side of the patch collected around each point when estimating σ_k.
    pub patch_size: usize,
    /// Distance truncation (pixels).
    pub d_star: f64,
    /// Foreground threshold for instance pseudo-labels.
    pub t_fg: f64,
    /// Background threshold for instance pseudo-labels.
    pub t_bg: f64,
    /// Candidate-mask threshold at inference.
    pub t_0: f64,
    pub delta_intra: f64,
    pub delta_inter: f64,
    /// Background weight in the discriminative loss.
    pub alpha: f64,
    /// Mean-norm regularizer weight.
    pub gamma: f64,
    pub embed_dim: usize,
    /// Mean-shift window radius in embedding space.
    pub bandwidth: f64,
    pub k_clusters: usize,
    pub min_instance_size: usize,
    pub seed: u64,
    pub sigma_floor: f64,

    // Surrogate model and training schedule.
    pub patch_radius: usize,
    pub patch_dilation: usize,
    pub include_coords: bool,
    pub hidden_sizes: Vec<usize>,
    pub spn_epochs: usize,
    pub ien_epochs: usize,
    pub spn_lr: f64,
    pub ien_lr: f64,
    pub batch_pixels: usize,
    /// Mean-shift stopping tolerance as a fraction of the bandwidth.
    pub meanshift_tol_frac: f64,
    pub meanshift_max_iter: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            patch_size: 60,
            d_star: 20.0,
            t_fg: 0.5,
            t_bg: 0.3,
            t_0: 0.3,
            delta_intra: 0.5,
            delta_inter: 3.0,
            alpha: 1.0,
            gamma: 0.001,
            embed_dim: 16,
            bandwidth: 1.5,
            k_clusters: 3,
            min_instance_size: 16,
            seed: 0,
            sigma_floor: 1e-6,
            patch_radius: 2,
            patch_dilation: 1,
            include_coords: true,
            hidden_sizes: vec![64, 64],
            spn_epochs: 60,
            ien_epochs: 300,
            spn_lr: 1e-3,
            ien_lr: 1e-3,
            batch_pixels: 4096,
            meanshift_tol_frac: 1e-3,
            meanshift_max_iter: 300,
        }
    }
}

impl PipelineConfig {
    /// TNBC setting: λ = 0.12, L = 80, d* = 18, T_bg = 0.2, α = 0.5.
    pub fn tnbc() -> Self {
        Self {
            lambda: 0.12,
            patch_size: 80,
            d_star: 18.0,
            t_bg: 0.2,
            alpha: 0.5,
            ..Self::default()
        }
    }

    pub fn meanshift_tol(&self) -> f64 {
        self.meanshift_tol_frac * self.bandwidth
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [("t_fg", self.t_fg), ("t_bg", self.t_bg), ("t_0", self.t_0)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.t_bg >= self.t_fg {
            return fail(format!(
                "t_bg ({}) must be less than t_fg ({})",
                self.t_bg, self.t_fg
            ));
        }
        if self.delta_intra >= self.delta_inter {
            return fail(format!(
                "delta_intra ({}) must be less than delta_inter ({})",
                self.delta_intra, self.delta_inter
            ));
        }
        if self.delta_intra < 0.0 {
            return fail("delta_intra must be non-negative".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} = {v} must be a finite non-negative number"));
            }
        }
        if !(self.bandwidth > 0.0) {
            return fail(format!("bandwidth = {} must be positive", self.bandwidth));
        }
        if !(self.d_star > 0.0) {
            return fail(format!("d_star = {} must be positive", self.d_star));
        }
        if !(self.sigma_floor > 0.0) {
            return fail("sigma_floor must be positive".into());
        }
        if self.patch_size < 9 {
            return fail(format!(
                "patch_size = {} must be at least 9",
                self.patch_size
            ));
        }
        if self.k_clusters < 2 {
            return fail(format!(
                "k_clusters = {} must be at least 2",
                self.k_clusters
            ));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.patch_dilation == 0 {
            return fail("patch_dilation must be positive".into());
        }
        if self.batch_pixels == 0 {
            return fail("batch_pixels must be positive".into());
        }
        if !(self.meanshift_tol_frac > 0.0) {
            return fail("meanshift_tol_frac must be positive".into());
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{value}`")))
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "d_star" => self.d_star = num(key, value)?,
            "t_fg" => self.t_fg = num(key, value)?,
            "t_bg" => self.t_bg = num(key, value)?,
            "t_0" => self.t_0 = num(key, value)?,
            "delta_intra" => self.delta_intra = num(key, value)?,
            "delta_inter" => self.delta_inter = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "bandwidth" => self.bandwidth = num(key, value)?,
            "k_clusters" => self.k_clusters = num(key, value)?,
            "min_instance_size" => self.min_instance_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sigma_floor" => self.sigma_floor = num(key, value)?,
            "patch_radius" => self.patch_radius = num(key, value)?,
            "patch_dilation" => self.patch_dilation = num(key, value)?,
            "include_coords" => self.include_coords = num(key, value)?,
            "hidden_sizes" => {
                self.hidden_sizes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "spn_epochs" => self.spn_epochs = num(key, value)?,
            "ien_epochs" => self.ien_epochs = num(key, value)?,
            "spn_lr" => self.spn_lr = num(key, value)?,
            "ien_lr" => self.ien_lr = num(key, value)?,
            "batch_pixels" => self.batch_pixels = num(key, value)?,
            "meanshift_tol_frac" => self.meanshift_tol_frac = num(key, value)?,
            "meanshift_max_iter" => self.meanshift_max_iter = num(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat config document over the defaults. Blank lines and `#`
    /// comments are ignored. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies assignments from `text` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden_sizes.iter().map(|h| h.to_string()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("lambda", self.lambda.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("d_star", self.d_star.to_string()),
            ("t_fg", self.t_fg.to_string()),
            ("t_bg", self.t_bg.to_string()),
            ("t_0", self.t_0.to_string()),
            ("delta_intra", self.delta_intra.to_string()),
            ("delta_inter", self.delta_inter.to_string()),
            ("alpha", self.alpha.to_string()),
            ("gamma", self.gamma.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("bandwidth", self.bandwidth.to_string()),
            ("k_clusters", self.k_clusters.to_string()),
            ("min_instance_size", self.min_instance_size.to_string()),
            ("seed", self.seed.to_string()),
            ("sigma_floor", self.sigma_floor.to_string()),
            ("patch_radius", self.patch_radius.to_string()),
            ("patch_dilation", self.patch_dilation.to_string()),
            ("include_coords", self.include_coords.to_string()),
            ("hidden_sizes", hidden.join(",")),
            ("spn_epochs", self.spn_epochs.to_string()),
            ("ien_epochs", self.ien_epochs.to_string()),
            ("spn_lr", self.spn_lr.to_string()),
            ("ien_lr", self.ien_lr.to_string()),
            ("batch_pixels", self.batch_pixels.to_string()),
            ("meanshift_tol_frac", self.meanshift_tol_frac.to_string()),
            ("meanshift_max_iter", self.meanshift_max_iter.to_string()),
        ];
        rows.into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::tnbc().validate().unwrap();
    }

    #[test]
    fn reported_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!((c.lambda, c.patch_size, c.d_star), (0.2, 60, 20.0));
        assert_eq!((c.t_fg, c.t_bg, c.t_0), (0.5, 0.3, 0.3));
        assert_eq!(
            (c.delta_intra, c.delta_inter, c.gamma, c.alpha),
            (0.5, 3.0, 0.001, 1.0)
        );
        assert_eq!((c.embed_dim, c.bandwidth), (16, 1.5));
        let t = PipelineConfig::tnbc();
        assert_eq!(
            (t.lambda, t.patch_size, t.d_star, t.t_bg, t.alpha),
            (0.12, 80, 18.0, 0.2, 0.5)
        );
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::default();
        c.hidden_sizes = vec![32, 16];
        c.seed = 99;
        c.lambda = 0.125;
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn threshold_order_names_fields() {
        let err = PipelineConfig::parse("t_bg = 0.6\nt_fg = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t_bg") && msg.contains("t_fg"), "{msg}");
    }

    #[test]
    fn rejects_unknown_keys_and_garbage() {
        assert!(PipelineConfig::parse("nonsense = 1").is_err());
        assert!(PipelineConfig::parse("lambda 0.2").is_err());
        assert!(PipelineConfig::parse("lambda = abc").is_err());
        assert!(PipelineConfig::parse("# comment only\n\n").is_ok());
    }

    #[test]
    fn rejects_bad_margins_and_bandwidth() {
        assert!(PipelineConfig::parse("delta_intra = 3\ndelta_inter = 0.5").is_err());
        assert!(PipelineConfig::parse("bandwidth = 0").is_err());
        assert!(PipelineConfig::parse("gamma = -1").is_err());
    }
}
