//! The training objective: foreground cross-entropy, a background uncertainty
//! regularizer and the log-barrier size terms.
//!
//! ```text
//! loss = H(p, p_fg) + lambda * R(p_bg) - (1/t) * [ln(s+/|Omega|) + ln(s-/|Omega|)]
//! ```
//!
//! `R` is either `-H(p_bg)` ([`Variant::Eem`]) or `H(q, p_bg)` with `q`
//! uniform ([`Variant::Sem`]). All logarithms are natural.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking their logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// Background regularizer flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Explicit entropy maximization, `R = -H(p_bg)`.
    Eem,
    /// Surrogate entropy maximization, `R = H(uniform, p_bg)`.
    Sem,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Eem => "eem",
            Variant::Sem => "sem",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eem" => Ok(Variant::Eem),
            "sem" => Ok(Variant::Sem),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?}; valid values: eem, sem"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Weight of the background regularizer. Zero disables it.
    pub lambda: f64,
    /// Barrier sharpness; larger values weaken the size terms.
    pub t: f64,
    pub num_classes: usize,
    /// Number of pixels in the spatial domain.
    pub omega_size: usize,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!("t must be > 0, got {}", self.t)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.omega_size == 0 {
            return Err(Error::Config("empty spatial domain".into()));
        }
        Ok(())
    }
}

/// A point on the class simplex held in a graph.
#[derive(Clone, Copy, Debug)]
pub struct Probabilities(Var);

impl Probabilities {
    /// Checks that `v` is a 1-d distribution over at least two classes.
    pub fn new(g: &Graph, v: Var) -> Result<Self> {
        let value = g.value(v);
        if value.shape().len() != 1 || value.numel() < 2 {
            return Err(Error::InvalidShape {
                op: "probabilities",
                msg: format!("expected [c] with c >= 2, got {:?}", value.shape()),
            });
        }
        let data = value.data();
        if data.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain {
                op: "probabilities",
                msg: format!("component outside [0, 1] in {data:?}"),
            });
        }
        let total: f64 = data.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Domain {
                op: "probabilities",
                msg: format!("components sum to {total}, not 1"),
            });
        }
        Ok(Self(v))
    }

    pub fn from_logits(g: &mut Graph, logits: Var) -> Result<Self> {
        let p = g.softmax(logits)?;
        Self::new(g, p)
    }

    pub fn one_hot(g: &mut Graph, class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut t = Tensor::zeros(&[num_classes]);
        t.data_mut()[class] = 1.0;
        let v = g.constant(t);
        Self::new(g, v)
    }

    pub fn uniform(g: &mut Graph, num_classes: usize) -> Result<Self> {
        let v = g.constant(Tensor::full(&[num_classes], 1.0 / num_classes as f64));
        Self::new(g, v)
    }

    pub fn var(&self) -> Var {
        self.0
    }

    pub fn num_classes(&self, g: &Graph) -> usize {
        g.value(self.0).numel()
    }

    pub fn values<'g>(&self, g: &'g Graph) -> &'g [f64] {
        g.value(self.0).data()
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn argmax(&self, g: &Graph) -> usize {
        argmax(self.values(g))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn ensure_same_classes(g: &Graph, a: Probabilities, b: Probabilities) -> Result<()> {
    let (sa, sb) = (g.shape(a.var()), g.shape(b.var()));
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// `H(p) = -sum_c p_c ln max(p_c, 1e-12)`, so `0 ln 0 = 0`.
pub fn entropy(g: &mut Graph, p: Probabilities) -> Result<Var> {
    let clamped = g.clamp_min(p.var(), LOG_FLOOR);
    let logs = g.log(clamped)?;
    let weighted = g.mul(p.var(), logs)?;
    let total = g.sum(weighted);
    Ok(g.neg(total))
}

/// `H(p, p_hat) = -sum_c p_c ln max(p_hat_c, 1e-12)`. `p` is treated as a
/// constant even if it carries gradients.
pub fn cross_entropy(g: &mut Graph, p: Probabilities, p_hat: Probabilities) -> Result<Var> {
    ensure_same_classes(g, p, p_hat)?;
    let target = g.constant(g.value(p.var()).clone());
    let clamped = g.clamp_min(p_hat.var(), LOG_FLOOR);
    let logs = g.log(clamped)?;
    let weighted = g.mul(target, logs)?;
    let total = g.sum(weighted);
    Ok(g.neg(total))
}

/// `R(p_bg)`: minimized, in both variants, exactly at the uniform distribution.
pub fn background_regularizer(g: &mut Graph, p_hat_bg: Probabilities, cfg: &ObjectiveConfig) -> Result<Var> {
    match cfg.variant {
        Variant::Eem => {
            let h = entropy(g, p_hat_bg)?;
            Ok(g.neg(h))
        }
        Variant::Sem => {
            let q = Probabilities::uniform(g, p_hat_bg.num_classes(g))?;
            cross_entropy(g, q, p_hat_bg)
        }
    }
}

/// `-(1/t) [ln(s+/|Omega|) + ln(s-/|Omega|)]`. Non-positive sizes are an error.
pub fn size_barrier(g: &mut Graph, s_plus: Var, s_minus: Var, cfg: &ObjectiveConfig) -> Result<Var> {
    for (name, s) in [("s+", s_plus), ("s-", s_minus)] {
        let value = g.value(s);
        if !value.is_scalar() {
            return Err(Error::InvalidShape {
                op: "size_barrier",
                msg: format!("{name} must be a scalar, got {:?}", value.shape()),
            });
        }
        let v = value.data()[0];
        if !(v > 0.0) {
            return Err(Error::Domain {
                op: "size_barrier",
                msg: format!("{name} = {v} violates the strict positivity constraint"),
            });
        }
    }
    let omega = cfg.omega_size as f64;
    let fp = g.scalar_mul(s_plus, 1.0 / omega);
    let fm = g.scalar_mul(s_minus, 1.0 / omega);
    let lp = g.log(fp)?;
    let lm = g.log(fm)?;
    let both = g.add(lp, lm)?;
    Ok(g.scalar_mul(both, -1.0 / cfg.t))
}

/// The three objective terms and their weighted total, all in one graph.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub cross_entropy: Var,
    pub regularizer: Var,
    pub barrier: Var,
    pub total: Var,
}

impl ObjectiveTerms {
    pub fn values(&self, g: &Graph) -> TermValues {
        TermValues {
            cross_entropy: g.scalar(self.cross_entropy),
            regularizer: g.scalar(self.regularizer),
            barrier: g.scalar(self.barrier),
            total: g.scalar(self.total),
        }
    }
}

/// Plain values of [`ObjectiveTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub barrier: f64,
    pub total: f64,
}

impl TermValues {
    pub fn is_finite(&self) -> bool {
        [self.cross_entropy, self.regularizer, self.barrier, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn objective_terms(
    g: &mut Graph,
    p: Probabilities,
    p_hat_fg: Probabilities,
    p_hat_bg: Probabilities,
    s_plus: Var,
    s_minus: Var,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    let ce = cross_entropy(g, p, p_hat_fg)?;
    let reg = background_regularizer(g, p_hat_bg, cfg)?;
    let barrier = size_barrier(g, s_plus, s_minus, cfg)?;
    let weighted = g.scalar_mul(reg, cfg.lambda);
    let partial = g.add(ce, weighted)?;
    let total = g.add(partial, barrier)?;
    Ok(ObjectiveTerms {
        cross_entropy: ce,
        regularizer: reg,
        barrier,
        total,
    })
}

pub fn total_loss(
    g: &mut Graph,
    p: Probabilities,
    p_hat_fg: Probabilities,
    p_hat_bg: Probabilities,
    s_plus: Var,
    s_minus: Var,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    objective_terms(g, p, p_hat_fg, p_hat_bg, s_plus, s_minus, cfg).map(|t| t.total)
}
