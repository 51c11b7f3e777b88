//! Resumable pipeline steps. Every `ensure_*` step first looks for its
//! artifact in the run directory and only computes it when missing.

use std::path::{Path, PathBuf};

use mfil::data_io::{
    generate_split, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic, write_csv, Sample,
    Splits,
};
use mfil::inversion::{
    train_full_path_inverse, train_inverse_component, ActivationCache, InverseComponent, InverseStack,
    InverseTrainingReport, Variant,
};
use mfil::model_zoo::{train_forward_model, ForwardModel, Stage};
use mfil::rng::derive_seed;

use crate::config::RunConfig;
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.9e}")
}

pub struct Pipeline {
    pub config: RunConfig,
    pub dir: PathBuf,
    data: Option<Splits<f64>>,
    model: Option<ForwardModel<f64>>,
    caches: Option<(ActivationCache<f64>, ActivationCache<f64>)>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

impl Pipeline {
    /// Opens (or starts) the run directory and writes the resolved config
    /// snapshot. A directory holding a run with another config is refused so
    /// stale checkpoints are never mixed in.
    pub fn open(config: RunConfig) -> Result<Self> {
        let dir = config.out_dir();
        create_dir(&dir)?;
        let snapshot = serde_json::to_string_pretty(&config).map_err(|e| CliError::Other(e.to_string()))? + "\n";
        let path = dir.join("config.resolved.json");
        match std::fs::read_to_string(&path) {
            Ok(old) if old != snapshot => {
                return Err(CliError::Config(format!(
                    "{} belongs to a run with a different configuration",
                    dir.display()
                )))
            }
            Ok(_) => {}
            Err(_) => write_atomic(&path, snapshot.as_bytes())?,
        }
        Ok(Self { config, dir, data: None, model: None, caches: None })
    }

    pub fn seed(&self, tag: &str, index: u64) -> u64 {
        derive_seed(self.config.seed, tag, index)
    }

    pub fn path(&self, parts: &[&str]) -> Result<PathBuf> {
        let mut p = self.dir.clone();
        for part in parts {
            p.push(part);
        }
        if let Some(parent) = p.parent() {
            create_dir(parent)?;
        }
        Ok(p)
    }

    pub fn ensure_data(&mut self) -> Result<&Splits<f64>> {
        if self.data.is_none() {
            let c = &self.config;
            let split = |name: &str, count: usize| -> Result<Vec<Sample<f64>>> {
                let dir = self.dir.join("data").join(name);
                if dir.join("annotations.jsonl").exists() {
                    let s: Vec<Sample<f64>> = load_dataset(&dir)?;
                    if s.len() == count {
                        return Ok(s);
                    }
                }
                eprintln!("generating {count} {name} samples");
                let s = generate_split(c.seed, name, c.mode(), c.model.image_size, count);
                create_dir(&dir)?;
                save_dataset(&dir, &s)?;
                Ok(s)
            };
            let train = split("train", c.data.train)?;
            let val = split("val", c.data.val)?;
            let test = split("test", c.data.test)?;
            self.data = Some(Splits { train, val, test });
        }
        Ok(self.data.as_ref().expect("just set"))
    }

    pub fn data(&self) -> &Splits<f64> {
        self.data.as_ref().expect("ensure_data first")
    }

    /// Test images used by the analyses.
    pub fn eval_set(&self) -> &[Sample<f64>] {
        let test = &self.data().test;
        &test[..self.config.eval_samples.map_or(test.len(), |n| n.min(test.len()))]
    }

    pub fn ensure_forward(&mut self) -> Result<&ForwardModel<f64>> {
        self.ensure_data()?;
        if self.model.is_none() {
            let path = self.path(&["forward.ckpt"])?;
            let model = if path.exists() {
                ForwardModel::from_checkpoint(&load_checkpoint(&path)?)?
            } else {
                let c = &self.config;
                let mut m = ForwardModel::new(c.model.clone(), self.seed("forward-init", 0))?;
                eprintln!("training forward model ({} parameters)", m.parameter_count());
                let d = self.data();
                let report = train_forward_model(&mut m, &d.train, &d.val, &c.forward, self.seed("forward-train", 0))?;
                let rows: Vec<Vec<String>> = report
                    .epochs
                    .iter()
                    .map(|e| vec![e.epoch.to_string(), fmt_f64(e.train_loss), fmt_f64(e.val_metric)])
                    .collect();
                write_csv(&self.path(&["forward_curve.csv"])?, &["epoch", "train_loss", "val_metric"], &rows)?;
                save_checkpoint(&path, &m.to_checkpoint()?)?;
                m
            };
            self.model = Some(model);
        }
        Ok(self.model.as_ref().expect("just set"))
    }

    pub fn model(&self) -> &ForwardModel<f64> {
        self.model.as_ref().expect("ensure_forward first")
    }

    fn ensure_caches(&mut self) -> Result<()> {
        self.ensure_forward()?;
        if self.caches.is_none() {
            let (m, d) = (self.model(), self.data());
            self.caches = Some((ActivationCache::build(m, &d.train)?, ActivationCache::build(m, &d.val)?));
        }
        Ok(())
    }

    fn write_curve(&self, parts: &[&str], report: &InverseTrainingReport) -> Result<()> {
        let rows: Vec<Vec<String>> = report
            .epochs
            .iter()
            .map(|e| vec![e.epoch.to_string(), fmt_f64(e.train_mse), fmt_f64(e.val_mse)])
            .collect();
        Ok(write_csv(&self.path(parts)?, &["epoch", "train_mse", "val_mse"], &rows)?)
    }

    /// Modular inverse `instance` for `stage` with `variant`.
    pub fn ensure_inverse(&mut self, stage: Stage, variant: Variant, instance: usize) -> Result<InverseComponent<f64>> {
        self.ensure_forward()?;
        let v = variant.resolve(&self.config.model, stage)?;
        let name = format!("{stage}-{v}-{instance}");
        let path = self.path(&["inverse", &format!("{name}.ckpt")])?;
        if path.exists() {
            return Ok(InverseComponent::from_checkpoint(&load_checkpoint(&path)?)?);
        }
        self.ensure_caches()?;
        eprintln!("training inverse {name}");
        let (tr, va) = self.caches.as_ref().expect("built");
        let seed = self.seed(&format!("inverse-{stage}-{v}"), instance as u64);
        let (c, report) = train_inverse_component(self.model(), stage, v, tr, va, &self.config.inverse, seed)?;
        self.write_curve(&["inverse", &format!("{name}.csv")], &report)?;
        save_checkpoint(&path, &c.to_checkpoint()?)?;
        Ok(c)
    }

    pub fn ensure_full_path(&mut self, stage: Stage, instance: usize) -> Result<InverseComponent<f64>> {
        self.ensure_forward()?;
        let name = format!("{stage}-{instance}");
        let path = self.path(&["full_path", &format!("{name}.ckpt")])?;
        if path.exists() {
            return Ok(InverseComponent::from_checkpoint(&load_checkpoint(&path)?)?);
        }
        self.ensure_caches()?;
        eprintln!("training full-path inverse {name}");
        let (tr, va) = self.caches.as_ref().expect("built");
        let seed = self.seed(&format!("full-path-{stage}"), instance as u64);
        let (c, report) = train_full_path_inverse(self.model(), stage, tr, va, &self.config.inverse, seed)?;
        self.write_curve(&["full_path", &format!("{name}.csv")], &report)?;
        save_checkpoint(&path, &c.to_checkpoint()?)?;
        Ok(c)
    }

    /// Stack of instance `k`, one configured variant per stage.
    pub fn ensure_stack(&mut self, instance: usize) -> Result<InverseStack<f64>> {
        let plan = self.config.model.stages().to_vec();
        let mut comps = Vec::with_capacity(plan.len());
        for s in plan {
            let v = self.config.variant(s);
            comps.push(self.ensure_inverse(s, v, instance)?);
        }
        Ok(InverseStack::new(&self.config.model, comps)?)
    }
}
