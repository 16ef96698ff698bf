//! Dual masking over the `V × T′` token grid: Bernoulli random masking or
//! post-fix masking of the temporal second half.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability of drawing [`MaskScheme::Random`] in [`draw_dual_mask`].
pub const RANDOM_SCHEME_PROBABILITY: f64 = 0.75;
pub const DEFAULT_MASK_RATIO: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskScheme {
    Random,
    PostFix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Variate-major `V × T′` grid, `true` = visible.
    pub visible: Vec<bool>,
    pub variates: usize,
    pub patches: usize,
    pub scheme: MaskScheme,
    pub ratio: f64,
}

impl MaskPlan {
    /// Everything visible.
    pub fn all_visible(variates: usize, patches: usize) -> Self {
        Self { visible: vec![true; variates * patches], variates, patches, scheme: MaskScheme::Random, ratio: 0.0 }
    }

    /// Horizon masking for forecasting: the first `visible_patches` columns
    /// of every variate are visible, the rest masked.
    pub fn prefix(variates: usize, patches: usize, visible_patches: usize) -> Self {
        let visible = (0..variates * patches).map(|i| i % patches < visible_patches).collect();
        Self {
            visible,
            variates,
            patches,
            scheme: MaskScheme::PostFix,
            ratio: 1.0 - visible_patches as f64 / patches as f64,
        }
    }

    #[inline]
    pub fn is_visible(&self, v: usize, t: usize) -> bool {
        self.visible[v * self.patches + t]
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    pub fn num_masked(&self) -> usize {
        self.visible.len() - self.num_visible()
    }

    /// Grid indices that are both visible and valid, in grid order.
    pub fn effective_visible(&self, token_validity: &[bool]) -> Result<Vec<usize>> {
        if token_validity.len() != self.visible.len() {
            return Err(Error::Shape(format!(
                "mask covers {} tokens but validity covers {}",
                self.visible.len(),
                token_validity.len()
            )));
        }
        Ok(self
            .visible
            .iter()
            .zip(token_validity)
            .enumerate()
            .filter(|(_, (m, v))| **m && **v)
            .map(|(i, _)| i)
            .collect())
    }

    /// Extends the grid with `extra` masked rows (batch-padding variates).
    pub fn padded_to(&self, variates: usize) -> MaskPlan {
        let mut visible = self.visible.clone();
        visible.resize(variates * self.patches, false);
        MaskPlan { visible, variates, ..self.clone() }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// i.i.d. `Bernoulli(1 − ratio)` visibility per cell; if nothing ends up
/// visible one uniformly chosen cell is forced visible.
pub fn random_mask<R: Rng + ?Sized>(variates: usize, patches: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n = variates * patches;
    if n == 0 {
        return Err(Error::Shape("empty token grid".into()));
    }
    let keep = 1.0 - ratio;
    let mut visible: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < keep).collect();
    if !visible.iter().any(|v| *v) {
        visible[rng.random_range(0..n)] = true;
    }
    Ok(MaskPlan { visible, variates, patches, scheme: MaskScheme::Random, ratio })
}

/// First `ceil(T′/2)` columns visible for every variate.
pub fn postfix_mask(variates: usize, patches: usize) -> Result<MaskPlan> {
    if patches < 2 {
        return Err(Error::Invalid(format!("post-fix masking needs at least two patches, got {patches}")));
    }
    if variates == 0 {
        return Err(Error::Shape("empty token grid".into()));
    }
    let mut plan = MaskPlan::prefix(variates, patches, patches.div_ceil(2));
    plan.ratio = 0.5;
    Ok(plan)
}

/// Random masking with probability 0.75, post-fix otherwise; `force`
/// pins the scheme. Grids with a single patch column always use random
/// masking.
pub fn draw_dual_mask<R: Rng + ?Sized>(
    variates: usize,
    patches: usize,
    ratio: f64,
    force: Option<MaskScheme>,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let scheme = match force {
        Some(s) => s,
        None => {
            if rng.random::<f64>() < RANDOM_SCHEME_PROBABILITY {
                MaskScheme::Random
            } else {
                MaskScheme::PostFix
            }
        }
    };
    match scheme {
        MaskScheme::PostFix if patches >= 2 => postfix_mask(variates, patches),
        _ => random_mask(variates, patches, ratio, rng),
    }
}
