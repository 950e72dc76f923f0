//! Named, runtime-selectable strategies.
//!
//! Three families are registered:
//! - imbalanced-branch objectives ([`ImbalancedLoss`]): `ce`, `ldam`;
//! - learning-rate schedules ([`LrSchedule`]): `step`, `cosine`;
//! - method presets ([`Method`]) that configure a whole training run:
//!   `ce`, `ldam`, `ldam-drw`, `ce-colb`, `dbltr`, `dbltr-drw`.
//!
//! Configs and the CLI refer to strategies by name and resolve them here.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::diffcore::Var;
use crate::losses::{imbalanced_loss, Margins};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Name → constructor table for one strategy family.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, fn() -> Box<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, make: fn() -> Box<T>) -> &mut Self {
        self.entries.insert(name, make);
        self
    }

    pub fn get(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .get(name)
            .map(|make| make())
            .ok_or_else(|| Error::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Per-step inputs an imbalanced-branch objective may use.
#[derive(Debug, Clone)]
pub struct ImbalancedContext {
    pub margins: Margins,
    /// Deferred re-weighting, when active for the current epoch.
    pub class_weights: Option<Vec<f64>>,
}

pub trait ImbalancedLoss: Send + Sync {
    fn name(&self) -> &'static str;
    fn loss<'t>(&self, logits: Var<'t>, labels: &[usize], ctx: &ImbalancedContext) -> Result<Var<'t>>;
}

/// Plain softmax cross-entropy; ignores margins.
pub struct CrossEntropy;

impl ImbalancedLoss for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn loss<'t>(&self, logits: Var<'t>, labels: &[usize], ctx: &ImbalancedContext) -> Result<Var<'t>> {
        let zero = Margins::zeros(ctx.margins.len());
        imbalanced_loss(logits, labels, &zero, ctx.class_weights.as_deref())
    }
}

/// Label-distribution-aware margin cross-entropy.
pub struct Ldam;

impl ImbalancedLoss for Ldam {
    fn name(&self) -> &'static str {
        "ldam"
    }

    fn loss<'t>(&self, logits: Var<'t>, labels: &[usize], ctx: &ImbalancedContext) -> Result<Var<'t>> {
        imbalanced_loss(logits, labels, &ctx.margins, ctx.class_weights.as_deref())
    }
}

pub fn imbalanced_losses() -> Registry<dyn ImbalancedLoss> {
    let mut r: Registry<dyn ImbalancedLoss> = Registry::new("imbalanced loss");
    r.register("ce", || Box::new(CrossEntropy))
        .register("ldam", || Box::new(Ldam));
    r
}

/// Learning-rate parameters shared by every schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LrParams {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub epochs: usize,
}

pub trait LrSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    /// Learning rate for a 1-based epoch.
    fn lr(&self, epoch: usize, p: &LrParams) -> f64;
}

fn warmup(epoch: usize, p: &LrParams) -> Option<f64> {
    (epoch <= p.warmup_epochs).then(|| p.base_lr * epoch as f64 / p.warmup_epochs as f64)
}

/// Linear warmup, then `decay` applied once per milestone reached.
pub struct StepSchedule;

impl LrSchedule for StepSchedule {
    fn name(&self) -> &'static str {
        "step"
    }

    fn lr(&self, epoch: usize, p: &LrParams) -> f64 {
        if let Some(lr) = warmup(epoch, p) {
            return lr;
        }
        let passed = p.milestones.iter().filter(|&&m| epoch >= m).count();
        p.base_lr * p.decay.powi(passed as i32)
    }
}

/// Linear warmup, then half-cosine from the base rate towards 0 at the last
/// epoch.
pub struct CosineSchedule;

impl LrSchedule for CosineSchedule {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn lr(&self, epoch: usize, p: &LrParams) -> f64 {
        if let Some(lr) = warmup(epoch, p) {
            return lr;
        }
        let span = (p.epochs - p.warmup_epochs).max(1) as f64;
        let t = (epoch - p.warmup_epochs - 1) as f64 / span;
        0.5 * p.base_lr * (1.0 + (PI * t).cos())
    }
}

pub fn lr_schedules() -> Registry<dyn LrSchedule> {
    let mut r: Registry<dyn LrSchedule> = Registry::new("lr schedule");
    r.register("step", || Box::new(StepSchedule))
        .register("cosine", || Box::new(CosineSchedule));
    r
}

/// A named training recipe applied on top of a base config.
pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn apply(&self, config: &mut TrainConfig);
}

macro_rules! method {
    ($ty:ident, $name:literal, $desc:literal, |$c:ident| $body:block) => {
        pub struct $ty;
        impl Method for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn description(&self) -> &'static str {
                $desc
            }
            fn apply(&self, $c: &mut TrainConfig) $body
        }
    };
}

method!(CeMethod, "ce", "plain cross-entropy, single branch", |c| {
    c.imbalanced_loss = "ce".into();
    c.colb = false;
    c.drw = false;
});
method!(LdamMethod, "ldam", "LDAM margins, single branch", |c| {
    c.imbalanced_loss = "ldam".into();
    c.colb = false;
    c.drw = false;
});
method!(
    LdamDrwMethod,
    "ldam-drw",
    "LDAM with deferred re-weighting, single branch",
    |c| {
        c.imbalanced_loss = "ldam".into();
        c.colb = false;
        c.drw = true;
    }
);
method!(
    CeColbMethod,
    "ce-colb",
    "cross-entropy imbalanced branch plus the contrastive branch",
    |c| {
        c.imbalanced_loss = "ce".into();
        c.colb = true;
        c.drw = false;
    }
);
method!(
    DbltrMethod,
    "dbltr",
    "LDAM imbalanced branch plus the contrastive branch",
    |c| {
        c.imbalanced_loss = "ldam".into();
        c.colb = true;
        c.drw = false;
    }
);
method!(
    DbltrDrwMethod,
    "dbltr-drw",
    "LDAM-DRW imbalanced branch plus the contrastive branch",
    |c| {
        c.imbalanced_loss = "ldam".into();
        c.colb = true;
        c.drw = true;
    }
);

pub fn methods() -> Registry<dyn Method> {
    let mut r: Registry<dyn Method> = Registry::new("method");
    r.register("ce", || Box::new(CeMethod))
        .register("ldam", || Box::new(LdamMethod))
        .register("ldam-drw", || Box::new(LdamDrwMethod))
        .register("ce-colb", || Box::new(CeColbMethod))
        .register("dbltr", || Box::new(DbltrMethod))
        .register("dbltr-drw", || Box::new(DbltrDrwMethod));
    r
}
