//! Decomposed power-injection model (PIM) of series/shunt FACTS devices.
//!
//! A device on branch I-J is an ideal series voltage source `V_T∠phi_T`
//! between bus I and the branch series admittance, plus a shunt quadrature
//! current source of magnitude `i_q` at bus I. The PIM replaces both with
//! five equivalent power injections at the terminal buses so the bus
//! admittance matrix keeps its device-free symmetric form:
//!
//! * `p_i`, `q_i1`: series-source effect at bus I, with the real power the
//!   series converter emits drawn back at bus I through the DC link;
//! * `q_i2 = -|V_I + V_T| * i_q`: shunt quadrature injection (positive
//!   `i_q` absorbs, the current lags the internal node voltage by 90 deg);
//! * `p_j`, `q_j`: series-source effect at bus J.
//!
//! [`compute_injections`] evaluates closed-form trigonometric expressions;
//! [`oracle_injections`] rebuilds the same quantities from the series
//! voltage-current source circuit in complex arithmetic. The printed forms
//! of the J-side and I-side reactive expressions in circulation disagree
//! with complex-power algebra, so the closed forms here were re-derived
//! from the source model and the oracle is the arbiter: both paths must
//! agree to 1e-8 over the whole operating envelope.

use std::fmt;

use num_complex::Complex64;

/// Device taxonomy. `beta1` gates the series terms, `beta2` the shunt term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    Upfc,
    Sssc,
    Statcom,
}

impl DeviceKind {
    /// Series-source applicability flag.
    pub fn beta1(self) -> f64 {
        match self {
            DeviceKind::Upfc | DeviceKind::Sssc => 1.0,
            DeviceKind::Statcom => 0.0,
        }
    }

    /// Shunt-source applicability flag.
    pub fn beta2(self) -> f64 {
        match self {
            DeviceKind::Upfc | DeviceKind::Statcom => 1.0,
            DeviceKind::Sssc => 0.0,
        }
    }

    pub fn parse(s: &str) -> Option<DeviceKind> {
        match s.to_ascii_lowercase().as_str() {
            "upfc" => Some(DeviceKind::Upfc),
            "sssc" => Some(DeviceKind::Sssc),
            "statcom" => Some(DeviceKind::Statcom),
            _ => None,
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceKind::Upfc => write!(f, "upfc"),
            DeviceKind::Sssc => write!(f, "sssc"),
            DeviceKind::Statcom => write!(f, "statcom"),
        }
    }
}

/// Closed interval used for injection and control limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn symmetric(mag: f64) -> Bounds {
        Bounds { min: -mag, max: mag }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.min <= x && x <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceLimits {
    /// Active injection limit at bus I (UPFC, SSSC).
    pub p_inj: Bounds,
    /// Series reactive injection limit at bus I (UPFC).
    pub q_inj1: Bounds,
    /// Shunt reactive injection limit at bus I (UPFC, STATCOM).
    pub q_inj2: Bounds,
    /// Series source magnitude ceiling, per-unit.
    pub v_t_max: f64,
    /// Shunt quadrature current range, per-unit.
    pub i_q: Bounds,
}

impl Default for DeviceLimits {
    fn default() -> Self {
        DeviceLimits {
            p_inj: Bounds::symmetric(1.0),
            q_inj1: Bounds::symmetric(1.0),
            q_inj2: Bounds::symmetric(1.0),
            v_t_max: 0.2,
            i_q: Bounds::symmetric(1.0),
        }
    }
}

/// Control state of a device: series source magnitude and angle, shunt
/// quadrature current magnitude.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeviceControls {
    pub v_t: f64,
    pub phi_t: f64,
    pub i_q: f64,
}

#[derive(Debug, Clone)]
pub struct FactsDevice {
    pub kind: DeviceKind,
    /// Terminal bus I: series source insertion point and shunt attachment.
    pub i_bus: usize,
    /// Terminal bus J: far end of the host branch.
    pub j_bus: usize,
    pub controls: DeviceControls,
    pub limits: DeviceLimits,
    /// Coupling admittance override; `None` means the host branch's
    /// series admittance.
    pub series_admittance_override: Option<Complex64>,
}

impl FactsDevice {
    pub fn new(kind: DeviceKind, i_bus: usize, j_bus: usize) -> FactsDevice {
        FactsDevice {
            kind,
            i_bus,
            j_bus,
            controls: DeviceControls::default(),
            limits: DeviceLimits::default(),
            series_admittance_override: None,
        }
    }

    /// Coupling admittance to use given the host branch's series admittance.
    pub fn effective_admittance(&self, branch_series: Complex64) -> Complex64 {
        self.series_admittance_override.unwrap_or(branch_series)
    }

    /// Kind-specific structural checks; strings feed the network validator.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.controls.v_t < 0.0 {
            v.push("series source magnitude v_t must be nonnegative".to_string());
        }
        for (name, b) in [
            ("p_inj", self.limits.p_inj),
            ("q_inj1", self.limits.q_inj1),
            ("q_inj2", self.limits.q_inj2),
            ("i_q", self.limits.i_q),
        ] {
            if b.min > b.max {
                v.push(format!("{name} limits out of order"));
            }
        }
        if self.limits.v_t_max < 0.0 {
            v.push("v_t_max must be nonnegative".to_string());
        }
        match self.kind {
            DeviceKind::Sssc => {
                if self.controls.i_q != 0.0 {
                    v.push("sssc has no shunt converter: i_q must be 0".to_string());
                }
            }
            DeviceKind::Statcom => {
                if self.controls.v_t != 0.0 {
                    v.push("statcom has no series converter: v_t must be 0".to_string());
                }
            }
            DeviceKind::Upfc => {}
        }
        if self.i_bus == self.j_bus {
            v.push("terminal buses must differ".to_string());
        }
        v
    }
}

/// The five equivalent injections of the decomposed PIM, per-unit.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Injections {
    pub p_i: f64,
    pub q_i1: f64,
    pub q_i2: f64,
    pub p_j: f64,
    pub q_j: f64,
}

impl Injections {
    pub fn max_abs_diff(&self, other: &Injections) -> f64 {
        [
            self.p_i - other.p_i,
            self.q_i1 - other.q_i1,
            self.q_i2 - other.q_i2,
            self.p_j - other.p_j,
            self.q_j - other.q_j,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

/// Partial derivatives of all five injections with respect to the terminal
/// voltages and the device controls. Each field holds d(injections)/d(var).
#[derive(Debug, Clone, Copy, Default)]
pub struct InjectionPartials {
    pub d_vm_i: Injections,
    pub d_vm_j: Injections,
    pub d_th_i: Injections,
    pub d_th_j: Injections,
    pub d_v_t: Injections,
    pub d_phi_t: Injections,
    pub d_i_q: Injections,
}

/// Closed-form PIM injections given the coupling admittance and terminal
/// phasors.
pub fn compute_injections(
    device: &FactsDevice,
    ys: Complex64,
    v_i: Complex64,
    v_j: Complex64,
) -> Injections {
    let (inj, _) = injections_with_partials(device, ys, v_i.norm(), v_i.arg(), v_j.norm(), v_j.arg());
    inj
}

/// Closed-form injections plus analytic partials, polar inputs. This is the
/// form the Newton power flow and the OPF consume.
pub fn injections_with_partials(
    device: &FactsDevice,
    ys: Complex64,
    vm_i: f64,
    th_i: f64,
    vm_j: f64,
    th_j: f64,
) -> (Injections, InjectionPartials) {
    let b1 = device.kind.beta1();
    let b2 = device.kind.beta2();
    let (g, b) = (ys.re, ys.im);
    let vt = device.controls.v_t;
    let ph = device.controls.phi_t;
    let iq = device.controls.i_q;

    let (s_i, c_i) = (th_i - ph).sin_cos();
    let (s_j, c_j) = (th_j - ph).sin_cos();

    let mut inj = Injections::default();
    let mut par = InjectionPartials::default();

    // series terms, bus I
    inj.p_i = b1 * (g * (-vt * vt - 2.0 * vm_i * vt * c_i + vm_j * vt * c_j) - b * vm_j * vt * s_j);
    par.d_vm_i.p_i = b1 * (-2.0 * g * vt * c_i);
    par.d_vm_j.p_i = b1 * (g * vt * c_j - b * vt * s_j);
    par.d_th_i.p_i = b1 * (2.0 * g * vm_i * vt * s_i);
    par.d_th_j.p_i = -b1 * vm_j * vt * (g * s_j + b * c_j);
    par.d_v_t.p_i = b1 * (g * (-2.0 * vt - 2.0 * vm_i * c_i + vm_j * c_j) - b * vm_j * s_j);
    par.d_phi_t.p_i = b1 * (g * (-2.0 * vm_i * vt * s_i + vm_j * vt * s_j) + b * vm_j * vt * c_j);

    inj.q_i1 = b1 * vm_i * vt * (b * c_i - g * s_i);
    par.d_vm_i.q_i1 = b1 * vt * (b * c_i - g * s_i);
    par.d_th_i.q_i1 = b1 * vm_i * vt * (-b * s_i - g * c_i);
    par.d_v_t.q_i1 = b1 * vm_i * (b * c_i - g * s_i);
    par.d_phi_t.q_i1 = b1 * vm_i * vt * (b * s_i + g * c_i);

    // shunt quadrature term at the internal node voltage magnitude
    let vp2 = vm_i * vm_i + vt * vt + 2.0 * vm_i * vt * c_i;
    let vp = vp2.max(0.0).sqrt();
    inj.q_i2 = b2 * (-vp * iq);
    if vp > 1e-12 {
        par.d_vm_i.q_i2 = -b2 * iq * (vm_i + vt * c_i) / vp;
        par.d_th_i.q_i2 = b2 * iq * vm_i * vt * s_i / vp;
        par.d_v_t.q_i2 = -b2 * iq * (vt + vm_i * c_i) / vp;
        par.d_phi_t.q_i2 = -b2 * iq * vm_i * vt * s_i / vp;
    }
    par.d_i_q.q_i2 = -b2 * vp;

    // series terms, bus J
    inj.p_j = b1 * vm_j * vt * (g * c_j + b * s_j);
    par.d_vm_j.p_j = b1 * vt * (g * c_j + b * s_j);
    par.d_th_j.p_j = b1 * vm_j * vt * (-g * s_j + b * c_j);
    par.d_v_t.p_j = b1 * vm_j * (g * c_j + b * s_j);
    par.d_phi_t.p_j = b1 * vm_j * vt * (g * s_j - b * c_j);

    inj.q_j = b1 * vm_j * vt * (g * s_j - b * c_j);
    par.d_vm_j.q_j = b1 * vt * (g * s_j - b * c_j);
    par.d_th_j.q_j = b1 * vm_j * vt * (g * c_j + b * s_j);
    par.d_v_t.q_j = b1 * vm_j * (g * s_j - b * c_j);
    par.d_phi_t.q_j = b1 * vm_j * vt * (-g * c_j - b * s_j);

    (inj, par)
}

/// Injections rebuilt from the series voltage-current source circuit.
///
/// An ideal source `V_T∠phi_T` sits between bus I and the coupling
/// admittance. Relative to the source-free branch the two-port draws the
/// extra current `ys*V_T` from bus I and delivers it into bus J; the real
/// power the series source emits, `Re(V_T * conj(I_series))`, is drawn
/// from bus I by the shunt converter; the quadrature current injects
/// `-|V_I + V_T| * i_q` at bus I. No trigonometric expansion is involved,
/// which keeps this path independent of [`compute_injections`].
pub fn oracle_injections(
    device: &FactsDevice,
    ys: Complex64,
    v_i: Complex64,
    v_j: Complex64,
) -> Injections {
    let b1 = device.kind.beta1();
    let b2 = device.kind.beta2();
    let v_t = Complex64::from_polar(device.controls.v_t, device.controls.phi_t);

    let ds_i = -v_i * (ys * v_t).conj();
    let ds_j = v_j * (ys * v_t).conj();
    let i_series = ys * (v_i + v_t - v_j);
    let p_dc = (v_t * i_series.conj()).re;
    let v_prime = (v_i + v_t).norm();

    Injections {
        p_i: b1 * (ds_i.re - p_dc),
        q_i1: b1 * ds_i.im,
        q_i2: b2 * (-v_prime * device.controls.i_q),
        p_j: b1 * ds_j.re,
        q_j: b1 * ds_j.im,
    }
}

/// Check the injection limits applicable to the device kind: the active
/// limit for UPFC and SSSC, the series reactive limit for UPFC only, the
/// shunt reactive limit for UPFC and STATCOM. Returns violated constraint
/// identifiers.
pub fn injection_limits_ok(device: &FactsDevice, inj: &Injections) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |label: &str, value: f64, bounds: Bounds| {
        if value > bounds.max {
            out.push(format!("({label}) upper"));
        }
        if value < bounds.min {
            out.push(format!("({label}) lower"));
        }
    };
    match device.kind {
        DeviceKind::Upfc => {
            check("6", inj.p_i, device.limits.p_inj);
            check("7", inj.q_i1, device.limits.q_inj1);
            check("8", inj.q_i2, device.limits.q_inj2);
        }
        DeviceKind::Sssc => {
            check("6", inj.p_i, device.limits.p_inj);
        }
        DeviceKind::Statcom => {
            check("8", inj.q_i2, device.limits.q_inj2);
        }
    }
    out
}
