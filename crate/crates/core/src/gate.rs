//! Differentiable concave gate over layer indices, its hard limit, and
//! rounding to an integer prune window.
//!
//! Layers are indexed from 0. For window start `a`, length `n` and
//! steepness `k` the soft gate is
//!
//! ```text
//! m_i = 1 - sigmoid(k (i - a)) * sigmoid(-k (i - a - n + 1))
//! ```
//!
//! which dips towards 0 on `[a, a + n - 1]` and rises towards 1 elsewhere.
//! At the two window edges `i == a` and `i == a + n - 1` the value tends to
//! 0.5, not 0, however large `k` gets.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ClpError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    a: f64,
    n: usize,
    k: f64,
    num_layers: usize,
}

impl GateParams {
    /// `a` is clamped into `[0, L - n]`.
    pub fn new(a: f64, n: usize, k: f64, num_layers: usize) -> Result<Self> {
        if n == 0 || n > num_layers {
            return Err(ClpError::Config(format!(
                "window length {n} must be in 1..={num_layers}"
            )));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(ClpError::Config(format!("steepness k must be positive, got {k}")));
        }
        if !a.is_finite() {
            return Err(ClpError::NumericDomain(format!("window start {a} is not finite")));
        }
        let mut gp = Self { a, n, k, num_layers };
        gp.set_a(a);
        Ok(gp)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn max_start(&self) -> f64 {
        (self.num_layers - self.n) as f64
    }

    /// Sets `a`, clamped into `[0, L - n]`.
    pub fn set_a(&mut self, a: f64) {
        self.a = a.clamp(0.0, self.max_start());
    }

    pub fn with_a(mut self, a: f64) -> Self {
        self.set_a(a);
        self
    }

    fn sigmoids(&self, i: usize) -> (f64, f64) {
        let x = i as f64 - self.a;
        let s1 = sigmoid64(self.k * x);
        let s2 = sigmoid64(-self.k * (x - self.n as f64 + 1.0));
        (s1, s2)
    }

    /// Gate value of layer `i`, evaluated as `(1 - s1) + s1 (1 - s2)` so that
    /// values near zero inside the window keep their relative precision.
    pub fn value(&self, i: usize) -> f64 {
        let x = i as f64 - self.a;
        let x1 = self.k * x;
        let x2 = -self.k * (x - self.n as f64 + 1.0);
        (sigmoid64(-x1) + sigmoid64(x1) * sigmoid64(-x2)).min(1.0)
    }

    /// `1 - m_i` computed directly, accurate where the gate is close to 1.
    pub fn removed(&self, i: usize) -> f64 {
        let (s1, s2) = self.sigmoids(i);
        s1 * s2
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Soft,
    Hard,
}

/// Per-layer gate values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    values: Vec<f64>,
    kind: MaskKind,
}

impl LayerMask {
    pub fn ones(num_layers: usize) -> Self {
        Self {
            values: vec![1.0; num_layers],
            kind: MaskKind::Hard,
        }
    }

    /// Soft mask from explicit values in `[0, 1]`.
    pub fn soft(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ClpError::NumericDomain(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Self {
            values,
            kind: MaskKind::Soft,
        })
    }

    /// Binary mask whose zeros must form one contiguous run.
    pub fn hard_from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ClpError::Contract("hard mask values must be 0 or 1".into()));
        }
        let zeros: Vec<usize> = (0..values.len()).filter(|&i| values[i] == 0.0).collect();
        if let (Some(&first), Some(&last)) = (zeros.first(), zeros.last()) {
            if last - first + 1 != zeros.len() {
                return Err(ClpError::Contract("hard mask zeros must be contiguous".into()));
            }
        }
        Ok(Self {
            values,
            kind: MaskKind::Hard,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The run of zeros of a hard mask.
    pub fn zero_window(&self) -> Option<PruneWindow> {
        if self.kind != MaskKind::Hard {
            return None;
        }
        let start = self.values.iter().position(|&v| v == 0.0);
        let length = self.values.iter().filter(|&&v| v == 0.0).count();
        Some(PruneWindow {
            start: start.unwrap_or(0),
            length,
        })
    }
}

/// Contiguous run of layers `[start, start + length)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneWindow {
    pub start: usize,
    pub length: usize,
}

impl PruneWindow {
    pub fn new(start: usize, length: usize) -> Self {
        Self { start, length }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.end() > num_layers {
            return Err(ClpError::Contract(format!(
                "window [{}, {}) does not fit {num_layers} layers",
                self.start,
                self.end()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..self.end()).contains(&layer)
    }

    /// Window at the very end of the stack.
    pub fn tail(num_layers: usize, length: usize) -> Self {
        Self {
            start: num_layers.saturating_sub(length),
            length,
        }
    }
}

/// Soft gate values for every layer.
pub fn soft_mask(gp: &GateParams) -> LayerMask {
    LayerMask {
        values: (0..gp.num_layers).map(|i| gp.value(i)).collect(),
        kind: MaskKind::Soft,
    }
}

/// Zeros on the window, ones elsewhere.
pub fn hard_mask(w: PruneWindow, num_layers: usize) -> Result<LayerMask> {
    w.validate(num_layers)?;
    Ok(LayerMask {
        values: (0..num_layers).map(|i| if w.contains(i) { 0.0 } else { 1.0 }).collect(),
        kind: MaskKind::Hard,
    })
}

/// Closed-form `dm_i/da = k s1 s2 (s2 - s1)`.
pub fn gate_grad_a(gp: &GateParams, i: usize) -> f64 {
    let (s1, s2) = gp.sigmoids(i);
    gp.k * s1 * s2 * (s2 - s1)
}

/// Rounds `a` half away from zero and clamps it into `[0, L - n]`.
pub fn round_window(gp: &GateParams) -> PruneWindow {
    let start = gp.a.round().clamp(0.0, gp.max_start()) as usize;
    PruneWindow {
        start,
        length: gp.n,
    }
}

/// Records the soft gate on `tape` as a function of the one-element leaf
/// `a`; returns one scalar node per layer.
pub fn soft_mask_on_tape(tape: &mut Tape<'_>, a: Var, gp: &GateParams) -> Vec<Var> {
    let k = gp.k as Real;
    let n = gp.n as Real;
    (0..gp.num_layers)
        .map(|i| {
            let i = i as Real;
            // k (i - a) and -k (i - a - n + 1)
            let left = tape.affine(a, -k, k * i);
            let right = tape.affine(a, k, -k * (i - n + 1.0));
            let s1 = tape.sigmoid(left);
            let s2 = tape.sigmoid(right);
            let dip = tape.mul(s1, s2).expect("scalar shapes agree");
            tape.affine(dip, -1.0, 1.0)
        })
        .collect()
}

/// Leaf for the window start, ready for [`soft_mask_on_tape`].
pub fn start_leaf(tape: &mut Tape<'_>, gp: &GateParams) -> Var {
    tape.leaf(Tensor::scalar(gp.a as Real), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_mask_reference_values() {
        let gp = GateParams::new(4.0, 3, 5.0, 12).unwrap();
        let m = soft_mask(&gp);
        assert!((m.values()[0] - (1.0 - 2.06e-9)).abs() < 1e-11);
        let s5 = 1.0 / (1.0 + (-5.0f64).exp());
        assert!((m.values()[5] - (1.0 - s5 * s5)).abs() < 1e-15);
        assert!((m.values()[5] - 0.013_34).abs() < 1e-5);
        assert!((m.values()[4] - 0.500_02).abs() < 1e-5);
        assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn hard_mask_examples() {
        let m = hard_mask(PruneWindow::new(3, 3), 8).unwrap();
        assert_eq!(m.values(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(m.zero_window(), Some(PruneWindow::new(3, 3)));
        assert_eq!(hard_mask(PruneWindow::new(2, 0), 8).unwrap().values(), &[1.0; 8]);
        let tail = hard_mask(PruneWindow::tail(8, 3), 8).unwrap();
        assert_eq!(tail.values(), &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(hard_mask(PruneWindow::new(6, 3), 8).is_err());
    }

    #[test]
    fn hard_masks_must_be_contiguous() {
        assert!(LayerMask::hard_from_values(vec![1.0, 0.0, 1.0, 0.0]).is_err());
        assert!(LayerMask::hard_from_values(vec![1.0, 0.5]).is_err());
        assert!(LayerMask::hard_from_values(vec![0.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn gradient_examples() {
        let gp = GateParams::new(4.0, 3, 5.0, 12).unwrap();
        assert!(gate_grad_a(&gp, 5).abs() < 1e-15);
        assert!((gate_grad_a(&gp, 4) - 1.2499).abs() < 1e-4);
        assert!(gate_grad_a(&gp, 0).abs() < 1e-7);
        assert!(gate_grad_a(&gp, 11).abs() < 1e-7);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &(a, n, k) in &[(4.0, 3, 5.0), (2.3, 2, 3.0), (6.7, 4, 10.0), (0.4, 1, 5.0)] {
            let gp = GateParams::new(a, n, k, 12).unwrap();
            for i in 0..12 {
                let h = 1e-6;
                let fd = (gp.with_a(a + h).value(i) - gp.with_a(a - h).value(i)) / (2.0 * h);
                assert!((fd - gate_grad_a(&gp, i)).abs() < 1e-8, "a={a} i={i}");
            }
        }
    }

    #[test]
    fn rounding_rule() {
        let w = |a: f64| round_window(&GateParams::new(a, 3, 5.0, 12).unwrap());
        assert_eq!(w(8.5).start, 9);
        assert_eq!(w(-0.4).start, 0);
        assert_eq!(w(11.7).start, 9);
        assert_eq!(w(2.49).start, 2);
        assert_eq!(w(4.0).length, 3);
    }

    #[test]
    fn start_is_clamped() {
        let gp = GateParams::new(31.0, 8, 5.0, 32).unwrap();
        assert_eq!(gp.a(), 24.0);
        assert_eq!(GateParams::new(-3.0, 2, 5.0, 8).unwrap().a(), 0.0);
    }

    #[test]
    fn invalid_params() {
        assert!(GateParams::new(0.0, 0, 5.0, 12).is_err());
        assert!(GateParams::new(0.0, 13, 5.0, 12).is_err());
        assert!(GateParams::new(0.0, 3, 0.0, 12).is_err());
        assert!(GateParams::new(f64::NAN, 3, 5.0, 12).is_err());
    }

    #[test]
    fn tape_gradient_matches_closed_form() {
        for &(a, n, k) in &[(4.0, 3, 5.0), (3.3, 2, 3.0), (5.9, 4, 10.0)] {
            let gp = GateParams::new(a, n, k, 12).unwrap();
            for i in 0..12 {
                let mut tape = Tape::new();
                let av = start_leaf(&mut tape, &gp);
                let mask = soft_mask_on_tape(&mut tape, av, &gp);
                assert!((tape.value(mask[i]).item() as f64 - gp.value(i)).abs() < 1e-12);
                let grads = tape.backward(mask[i]).unwrap();
                let g = grads.get(av).unwrap().item() as f64;
                assert!((g - gate_grad_a(&gp, i)).abs() < 1e-8, "a={a} i={i}");
            }
        }
    }

    #[test]
    fn steeper_gate_sharpens_interior_and_exterior() {
        // integer a: interior layers are a+1..a+n-2, exterior are outside [a, a+n-1]
        let (a, n) = (3.0, 4);
        for (k_lo, k_hi) in [(3.0, 5.0), (5.0, 10.0), (10.0, 20.0)] {
            let lo = soft_mask(&GateParams::new(a, n, k_lo, 12).unwrap());
            let hi = soft_mask(&GateParams::new(a, n, k_hi, 12).unwrap());
            for i in 4..=5 {
                assert!(hi.values()[i] < lo.values()[i]);
            }
            for i in [1usize, 2, 8, 9] {
                assert!(hi.values()[i] > lo.values()[i], "k {k_lo}->{k_hi} i={i}");
            }
        }
    }
}
