//! Maps between tensor multi-indices and particle coordinates.
//!
//! Every scheme is described as a list of logical *channels*: continuous
//! grid axes (a coordinate, a bond length, an angle) and parent-choice
//! modes. Bit coding rewrites each channel as a group of base-`p` digit
//! modes; everything else works on the collapsed logical values.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Particles closer than this are treated as coincident by [`EncodingScheme::encode`].
pub const COINCIDENT: f64 = 1e-9;

pub const DEFAULT_D_MIN: f64 = 0.5;

/// Uniform grid `low, low + h, ..., high` with `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub low: f64,
    pub high: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn new(low: f64, high: f64, points: usize) -> Result<Self> {
        let axis = GridAxis { low, high, points };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low < self.high) {
            return Err(Error::Domain(format!(
                "grid interval [{}, {}] is empty",
                self.low, self.high
            )));
        }
        if self.points < 2 {
            return Err(Error::Domain(format!(
                "grid needs at least 2 points, got {}",
                self.points
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.high - self.low) / (self.points - 1) as f64
    }

    pub fn f2i(&self, x: f64) -> usize {
        f2i(x, self)
    }

    pub fn i2f(&self, n: usize) -> Result<f64> {
        i2f(n, self)
    }

    fn with_points(&self, points: usize) -> GridAxis {
        GridAxis { points, ..*self }
    }
}

/// Nearest grid node, clamped into the index range.
pub fn f2i(x: f64, axis: &GridAxis) -> usize {
    let t = (x - axis.low) / (axis.high - axis.low) * (axis.points - 1) as f64;
    if t.is_nan() || t <= 0.0 {
        0
    } else {
        (t.round() as usize).min(axis.points - 1)
    }
}

pub fn i2f(n: usize, axis: &GridAxis) -> Result<f64> {
    if n >= axis.points {
        return Err(Error::Domain(format!(
            "grid index {n} out of range for {} points",
            axis.points
        )));
    }
    Ok(n as f64 / (axis.points - 1) as f64 * (axis.high - axis.low) + axis.low)
}

/// `K = v_1 + v_2 p + ... + v_q p^(q-1)`.
pub fn digits_value(digits: &[usize], p: usize) -> Result<usize> {
    if p < 2 {
        return Err(Error::Domain(format!("digit base must be >= 2, got {p}")));
    }
    let mut k = 0usize;
    for &v in digits.iter().rev() {
        if v >= p {
            return Err(Error::Domain(format!("digit {v} out of range for base {p}")));
        }
        k = k * p + v;
    }
    Ok(k)
}

/// Little-endian base-`p` digits of `k`, exactly `q` of them.
pub fn value_digits(mut k: usize, p: usize, q: usize) -> Vec<usize> {
    (0..q)
        .map(|_| {
            let v = k % p;
            k /= p;
            v
        })
        .collect()
}

/// Reads `digits` as a base-`p` number `K` and maps `0..=p^q-1` uniformly
/// onto `[low, high]`.
pub fn todecimal(digits: &[usize], p: usize, low: f64, high: f64) -> Result<f64> {
    if digits.is_empty() {
        return Err(Error::Domain("at least one digit is required".into()));
    }
    let k = digits_value(digits, p)?;
    let top = pow(p, digits.len())? - 1;
    Ok(k as f64 / top as f64 * (high - low) + low)
}

fn pow(p: usize, q: usize) -> Result<usize> {
    u32::try_from(q)
        .ok()
        .and_then(|q| p.checked_pow(q))
        .ok_or_else(|| Error::Domain(format!("{p}^{q} overflows")))
}

/// Particle positions, `M x 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    positions: Vec<[f64; 3]>,
}

impl Configuration {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Domain(format!(
                "a configuration needs at least 2 particles, got {}",
                positions.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite coordinate".into()));
        }
        Ok(Configuration { positions })
    }

    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(Error::Domain(format!(
                "{} coordinates is not a multiple of 3",
                coords.len()
            )));
        }
        Configuration::new(coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn flat(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.positions[i], self.positions[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// All `M(M-1)/2` pair distances, `(0,1), (0,2), ..., (M-2,M-1)`.
    pub fn pair_distances(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in i + 1..m {
                out.push(self.distance(i, j));
            }
        }
        out
    }

    /// Applies `x -> R x + t` to every particle.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: [f64; 3]) -> Configuration {
        let t = Vector3::from(translation);
        Configuration {
            positions: self
                .positions
                .iter()
                .map(|p| (rotation * Vector3::from(*p) + t).into())
                .collect(),
        }
    }

    fn vec(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }
}

/// Splitting of every mode into base-`p` digit modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitCoding {
    pub base: usize,
    pub digits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum Variant {
    /// Every Cartesian coordinate on its own axis.
    Direct { axes: [GridAxis; 3] },
    /// Per particle: parent choice, bond length, polar and azimuthal angle.
    SimpleRelative {
        r: GridAxis,
        n_theta: usize,
        n_phi: usize,
    },
    /// One shared bond length; per particle: parent choice and two angles.
    ConstDistRelative {
        r: GridAxis,
        n_theta: usize,
        n_phi: usize,
    },
    /// As `ConstDistRelative`, but angles are relative to the parent's frame,
    /// with `theta` in `[theta_min, pi]` and `phi` in `[0, pi]`.
    AngleRestrictedRelative {
        r: GridAxis,
        n_theta: usize,
        n_phi: usize,
        #[serde(default)]
        theta_min: f64,
    },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Direct { .. } => "direct",
            Variant::SimpleRelative { .. } => "simple-relative",
            Variant::ConstDistRelative { .. } => "const-dist-relative",
            Variant::AngleRestrictedRelative { .. } => "angle-restricted-relative",
        }
    }

    pub fn is_relative(&self) -> bool {
        !matches!(self, Variant::Direct { .. })
    }
}

/// One logical coordinate of the encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Channel {
    Axis(GridAxis),
    /// Choice among `count` preceding particles.
    Parent(usize),
}

impl Channel {
    fn size(&self) -> usize {
        match self {
            Channel::Axis(a) => a.points,
            Channel::Parent(c) => *c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Value {
    Real(f64),
    Parent(usize),
}

impl Value {
    fn real(self) -> f64 {
        match self {
            Value::Real(x) => x,
            Value::Parent(_) => unreachable!("channel layout mismatch"),
        }
    }

    fn parent(self) -> usize {
        match self {
            Value::Parent(c) => c,
            Value::Real(_) => unreachable!("channel layout mismatch"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingScheme {
    #[serde(flatten)]
    pub variant: Variant,
    #[serde(default)]
    pub bit_coding: Option<BitCoding>,
}

fn rz(phi: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), phi).into_inner()
}

fn ry(theta: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), theta).into_inner()
}

/// `R_ZY(theta, phi) = R_z(phi) R_y(theta)`.
pub fn r_zy(theta: f64, phi: f64) -> Matrix3<f64> {
    rz(phi) * ry(theta)
}

fn spherical(r: f64, theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(
        r * theta.sin() * phi.cos(),
        r * theta.sin() * phi.sin(),
        r * theta.cos(),
    )
}

/// `(theta, phi)` of a nonzero vector, `phi` in `[0, 2 pi)`.
fn angles_of(v: &Vector3<f64>) -> (f64, f64) {
    let r = v.norm();
    let theta = (v.z / r).clamp(-1.0, 1.0).acos();
    let mut phi = v.y.atan2(v.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    (theta, phi)
}

impl EncodingScheme {
    pub fn new(variant: Variant, bit_coding: Option<BitCoding>) -> Result<Self> {
        let scheme = EncodingScheme {
            variant,
            bit_coding,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn direct(low: f64, high: f64, points: usize) -> Result<Self> {
        let axis = GridAxis::new(low, high, points)?;
        EncodingScheme::new(Variant::Direct { axes: [axis; 3] }, None)
    }

    pub fn simple_relative(r: GridAxis, n_theta: usize, n_phi: usize) -> Result<Self> {
        EncodingScheme::new(Variant::SimpleRelative { r, n_theta, n_phi }, None)
    }

    pub fn const_dist_relative(r: GridAxis, n_theta: usize, n_phi: usize) -> Result<Self> {
        EncodingScheme::new(Variant::ConstDistRelative { r, n_theta, n_phi }, None)
    }

    pub fn angle_restricted_relative(
        r: GridAxis,
        n_theta: usize,
        n_phi: usize,
        theta_min: f64,
    ) -> Result<Self> {
        EncodingScheme::new(
            Variant::AngleRestrictedRelative {
                r,
                n_theta,
                n_phi,
                theta_min,
            },
            None,
        )
    }

    pub fn with_bit_coding(mut self, base: usize, digits: usize) -> Result<Self> {
        self.bit_coding = Some(BitCoding { base, digits });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.variant {
            Variant::Direct { axes } => {
                for a in axes {
                    a.validate()?;
                }
            }
            Variant::SimpleRelative { r, n_theta, n_phi }
            | Variant::ConstDistRelative { r, n_theta, n_phi }
            | Variant::AngleRestrictedRelative { r, n_theta, n_phi, .. } => {
                r.validate()?;
                if r.low <= 0.0 {
                    return Err(Error::Domain(format!("r_min must be positive, got {}", r.low)));
                }
                GridAxis::new(0.0, PI, *n_theta)?;
                GridAxis::new(0.0, PI, *n_phi)?;
            }
        }
        if let Variant::AngleRestrictedRelative { theta_min, .. } = self.variant {
            if !(0.0..PI).contains(&theta_min) {
                return Err(Error::Domain(format!(
                    "theta_min must lie in [0, pi), got {theta_min}"
                )));
            }
        }
        if let Some(b) = self.bit_coding {
            if b.base < 2 || b.digits < 1 {
                return Err(Error::Domain(format!(
                    "bit coding needs base >= 2 and digits >= 1, got {b:?}"
                )));
            }
            pow(b.base, b.digits)?;
        }
        Ok(())
    }

    fn theta_axis(&self) -> GridAxis {
        match self.variant {
            Variant::SimpleRelative { n_theta, .. } | Variant::ConstDistRelative { n_theta, .. } => {
                GridAxis {
                    low: 0.0,
                    high: PI,
                    points: n_theta,
                }
            }
            Variant::AngleRestrictedRelative {
                n_theta, theta_min, ..
            } => GridAxis {
                low: theta_min,
                high: PI,
                points: n_theta,
            },
            Variant::Direct { .. } => unreachable!("direct encoding has no angles"),
        }
    }

    fn phi_axis(&self) -> GridAxis {
        match self.variant {
            Variant::SimpleRelative { n_phi, .. } | Variant::ConstDistRelative { n_phi, .. } => {
                GridAxis {
                    low: 0.0,
                    high: 2.0 * PI,
                    points: n_phi,
                }
            }
            Variant::AngleRestrictedRelative { n_phi, .. } => GridAxis {
                low: 0.0,
                high: PI,
                points: n_phi,
            },
            Variant::Direct { .. } => unreachable!("direct encoding has no angles"),
        }
    }

    /// Logical channels for `m` particles, before bit coding. With bit
    /// coding, continuous axes are re-gridded to `p^q` points.
    pub fn channels(&self, m: usize) -> Result<Vec<Channel>> {
        if m < 2 {
            return Err(Error::Domain(format!("need at least 2 particles, got {m}")));
        }
        let regrid = |a: GridAxis| match self.bit_coding {
            Some(b) => a.with_points(b.base.pow(b.digits as u32)),
            None => a,
        };
        let mut out = Vec::new();
        match &self.variant {
            Variant::Direct { axes } => {
                for _ in 0..m {
                    out.extend(axes.iter().map(|&a| Channel::Axis(regrid(a))));
                }
            }
            Variant::SimpleRelative { r, .. } => {
                let (r, th, ph) = (regrid(*r), regrid(self.theta_axis()), regrid(self.phi_axis()));
                out.push(Channel::Axis(r));
                for i in 3..=m {
                    out.extend([
                        Channel::Parent(i - 1),
                        Channel::Axis(r),
                        Channel::Axis(th),
                        Channel::Axis(ph),
                    ]);
                }
            }
            Variant::ConstDistRelative { r, .. } | Variant::AngleRestrictedRelative { r, .. } => {
                let (r, th, ph) = (regrid(*r), regrid(self.theta_axis()), regrid(self.phi_axis()));
                out.push(Channel::Axis(r));
                for i in 3..=m {
                    out.extend([Channel::Parent(i - 1), Channel::Axis(th), Channel::Axis(ph)]);
                }
            }
        }
        Ok(out)
    }

    /// Number of digit modes used for a channel under bit coding.
    fn digit_count(&self, channel: &Channel) -> usize {
        let b = self.bit_coding.expect("bit coding");
        match channel {
            Channel::Axis(_) => b.digits,
            Channel::Parent(count) => {
                let mut q = 1;
                let mut cap = b.base;
                while cap < *count {
                    cap *= b.base;
                    q += 1;
                }
                q
            }
        }
    }

    pub fn tensor_shape(&self, m: usize) -> Result<Vec<usize>> {
        let channels = self.channels(m)?;
        Ok(match self.bit_coding {
            None => channels.iter().map(Channel::size).collect(),
            Some(b) => channels
                .iter()
                .flat_map(|c| std::iter::repeat(b.base).take(self.digit_count(c)))
                .collect(),
        })
    }

    /// Number of particles whose tensor shape has `d` modes, if any.
    pub fn particles_for_modes(&self, d: usize) -> Option<usize> {
        (2..=d.max(2)).find(|&m| self.tensor_shape(m).is_ok_and(|s| s.len() == d))
    }

    fn values(&self, channels: &[Channel], index: &[usize]) -> Result<Vec<Value>> {
        let mut out = Vec::with_capacity(channels.len());
        let mut pos = 0;
        for c in channels {
            let logical = match self.bit_coding {
                None => {
                    pos += 1;
                    index[pos - 1]
                }
                Some(b) => {
                    let q = self.digit_count(c);
                    let k = digits_value(&index[pos..pos + q], b.base)?;
                    pos += q;
                    match c {
                        Channel::Axis(_) => k,
                        Channel::Parent(count) => k * count / b.base.pow(q as u32),
                    }
                }
            };
            out.push(match c {
                Channel::Axis(a) => Value::Real(a.i2f(logical)?),
                Channel::Parent(_) => Value::Parent(logical),
            });
        }
        Ok(out)
    }

    fn quantize(&self, channels: &[Channel], values: &[Value]) -> Vec<usize> {
        let mut out = Vec::new();
        for (c, v) in channels.iter().zip(values) {
            let logical = match (c, v) {
                (Channel::Axis(a), Value::Real(x)) => a.f2i(*x),
                (Channel::Parent(_), Value::Parent(p)) => *p,
                _ => unreachable!("channel layout mismatch"),
            };
            match self.bit_coding {
                None => out.push(logical),
                Some(b) => {
                    let q = self.digit_count(c);
                    let k = match c {
                        Channel::Axis(_) => logical,
                        // Smallest K with floor(K * count / p^q) == logical.
                        Channel::Parent(count) => {
                            (logical * b.base.pow(q as u32)).div_ceil(*count)
                        }
                    };
                    out.extend(value_digits(k, b.base, q));
                }
            }
        }
        out
    }

    pub fn decode(&self, index: &[usize]) -> Result<Configuration> {
        let m = self.particles_for_modes(index.len()).ok_or_else(|| {
            Error::Domain(format!("no particle count matches {} modes", index.len()))
        })?;
        self.decode_m(m, index)
    }

    /// Decodes an index for `m` particles.
    pub fn decode_m(&self, m: usize, index: &[usize]) -> Result<Configuration> {
        let shape = self.tensor_shape(m)?;
        crate::tt::check_index(index, &shape)?;
        let channels = self.channels(m)?;
        let values = self.values(&channels, index)?;
        Ok(Configuration {
            positions: self.place(m, &values),
        })
    }

    /// Parent of each particle under `index`, counted from zero: `None` for
    /// the first particle and for every particle of the direct encoding.
    pub fn parents(&self, m: usize, index: &[usize]) -> Result<Vec<Option<usize>>> {
        crate::tt::check_index(index, &self.tensor_shape(m)?)?;
        let mut out = vec![None; m];
        if !self.variant.is_relative() {
            return Ok(out);
        }
        out[1] = Some(0);
        let channels = self.channels(m)?;
        let parents = self.values(&channels, index)?.into_iter().filter_map(|v| match v {
            Value::Parent(p) => Some(p),
            Value::Real(_) => None,
        });
        for (slot, p) in out[2..].iter_mut().zip(parents) {
            *slot = Some(p);
        }
        Ok(out)
    }

    fn place(&self, m: usize, values: &[Value]) -> Vec<[f64; 3]> {
        if let Variant::Direct { .. } = self.variant {
            return values
                .chunks(3)
                .map(|c| [c[0].real(), c[1].real(), c[2].real()])
                .collect();
        }
        let mut pos = vec![Vector3::zeros(); m];
        let mut frames = vec![Matrix3::identity(); m];
        frames[0] = r_zy(PI, 0.0);
        let r0 = values[0].real();
        pos[1] = Vector3::new(0.0, 0.0, r0);
        let mut it = values[1..].iter();
        for i in 2..m {
            let parent = it.next().unwrap().parent();
            let r = match self.variant {
                Variant::SimpleRelative { .. } => it.next().unwrap().real(),
                _ => r0,
            };
            let theta = it.next().unwrap().real();
            let phi = it.next().unwrap().real();
            pos[i] = match self.variant {
                Variant::AngleRestrictedRelative { .. } => {
                    frames[i] = frames[parent] * r_zy(theta, phi);
                    pos[parent] + r * (frames[i] * Vector3::z())
                }
                _ => pos[parent] + spherical(r, theta, phi),
            };
        }
        pos.into_iter().map(Into::into).collect()
    }

    /// Quantizes a configuration. Relative variants first move particle 1
    /// to the origin, particle 2 onto `+z` and the first off-axis particle
    /// onto `phi = 0`. Each later particle takes the preceding particle
    /// whose quantized offset lands closest to it as parent. Offsets are
    /// measured from the decoded parent, so quantization errors do not
    /// accumulate along the chain.
    pub fn encode(&self, c: &Configuration) -> Result<Vec<usize>> {
        let m = c.len();
        for i in 0..m {
            for j in i + 1..m {
                if c.distance(i, j) < COINCIDENT {
                    return Err(Error::Geometry(format!(
                        "particles {} and {} coincide",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let channels = self.channels(m)?;
        if let Variant::Direct { .. } = self.variant {
            let values: Vec<Value> = c.flat().into_iter().map(Value::Real).collect();
            return Ok(self.quantize(&channels, &values));
        }

        let upper_half = matches!(self.variant, Variant::AngleRestrictedRelative { .. });
        let q = canonical_frame(c, upper_half);
        let r_axis = match channels[0] {
            Channel::Axis(a) => a,
            Channel::Parent(_) => unreachable!("relative layouts start with the bond axis"),
        };
        let regrid = |a: GridAxis| match self.bit_coding {
            Some(b) => a.with_points(b.base.pow(b.digits as u32)),
            None => a,
        };
        let (ta, pa) = (regrid(self.theta_axis()), regrid(self.phi_axis()));
        let snap = |a: &GridAxis, x: f64| a.i2f(a.f2i(x)).expect("grid index in range");
        let shared_r = q[1].norm();
        let r_first = snap(&r_axis, shared_r);
        let mut values = vec![Value::Real(shared_r)];
        let mut dec = vec![Vector3::zeros(); m];
        let mut frames = vec![Matrix3::identity(); m];
        frames[0] = r_zy(PI, 0.0);
        dec[1] = Vector3::new(0.0, 0.0, r_first);
        for i in 2..m {
            // Among the already placed particles, take the parent whose
            // quantized offset reproduces particle i best; ties go to the
            // nearer parent.
            let mut best: Option<(f64, f64, Vec<Value>, Vector3<f64>, Matrix3<f64>)> = None;
            for parent in 0..i {
                let v = q[i] - dec[parent];
                let dist = v.norm();
                if dist < COINCIDENT {
                    continue;
                }
                let mut vals = vec![Value::Parent(parent)];
                let r = match self.variant {
                    Variant::SimpleRelative { .. } => {
                        let r = dist.clamp(r_axis.low, r_axis.high);
                        vals.push(Value::Real(r));
                        snap(&r_axis, r)
                    }
                    _ => r_first,
                };
                let (pos, frame) = match self.variant {
                    Variant::AngleRestrictedRelative { theta_min, .. } => {
                        let local = frames[parent].transpose() * v;
                        let (theta, mut phi) = angles_of(&local);
                        if phi > PI {
                            phi = if phi < 1.5 * PI { PI } else { 0.0 };
                        }
                        let theta = theta.max(theta_min);
                        vals.push(Value::Real(theta));
                        vals.push(Value::Real(phi));
                        let frame = frames[parent] * r_zy(snap(&ta, theta), snap(&pa, phi));
                        (dec[parent] + r * (frame * Vector3::z()), frame)
                    }
                    _ => {
                        let (theta, phi) = angles_of(&v);
                        vals.push(Value::Real(theta));
                        vals.push(Value::Real(phi));
                        let pos = dec[parent] + spherical(r, snap(&ta, theta), snap(&pa, phi));
                        (pos, Matrix3::identity())
                    }
                };
                let err = (pos - q[i]).norm();
                let better = match &best {
                    None => true,
                    Some((e, d, ..)) => err < e - 1e-12 || (err <= e + 1e-12 && dist < *d),
                };
                if better {
                    best = Some((err, dist, vals, pos, frame));
                }
            }
            let (_, _, vals, pos, frame) = best.ok_or_else(|| {
                Error::Geometry(format!("particle {} coincides with every predecessor", i + 1))
            })?;
            values.extend(vals);
            dec[i] = pos;
            frames[i] = frame;
        }
        Ok(self.quantize(&channels, &values))
    }

    /// True iff all pair distances are at least `d_min` and, for the
    /// direct variant, every coordinate lies in its axis interval.
    pub fn check_feasible(&self, c: &Configuration, d_min: f64) -> bool {
        if let Variant::Direct { axes } = &self.variant {
            for p in c.positions() {
                for (x, a) in p.iter().zip(axes) {
                    if *x < a.low || *x > a.high {
                        return false;
                    }
                }
            }
        }
        check_distances(c, d_min)
    }

    /// Per-coordinate box `(low, high)` for the direct variant.
    pub fn bounds(&self, m: usize) -> Option<Vec<(f64, f64)>> {
        match &self.variant {
            Variant::Direct { axes } => Some(
                (0..m)
                    .flat_map(|_| axes.iter().map(|a| (a.low, a.high)))
                    .collect(),
            ),
            _ => None,
        }
    }
}

pub fn check_distances(c: &Configuration, d_min: f64) -> bool {
    let m = c.len();
    for i in 0..m {
        for j in i + 1..m {
            if !(c.distance(i, j) >= d_min) {
                return false;
            }
        }
    }
    true
}

/// Positions after moving particle 1 to the origin and particle 2 onto
/// `+z`. The remaining freedom, a spin about `z`, is fixed by the first
/// off-axis particle: it is turned to `phi = 0`, or with `upper_half` only
/// flipped by `pi` when it has `y < 0` (the angle-restricted variant can
/// only express `phi` in `[0, pi]` off particles 1 and 2).
fn canonical_frame(c: &Configuration, upper_half: bool) -> Vec<Vector3<f64>> {
    let origin = c.vec(0);
    let mut q: Vec<Vector3<f64>> = (0..c.len()).map(|i| c.vec(i) - origin).collect();
    let u = q[1].normalize();
    let z = Vector3::z();
    let rot = if (u - z).norm() < 1e-15 {
        Matrix3::identity()
    } else if (u + z).norm() < 1e-12 {
        Rotation3::from_axis_angle(&Vector3::x_axis(), PI).into_inner()
    } else {
        let axis = Unit::new_normalize(u.cross(&z));
        let angle = u.dot(&z).clamp(-1.0, 1.0).acos();
        Rotation3::from_axis_angle(&axis, angle).into_inner()
    };
    for p in q.iter_mut() {
        *p = rot * *p;
    }
    q[1] = Vector3::new(0.0, 0.0, q[1].norm());
    let scale = q.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1.0);
    if let Some(p) = q[2..]
        .iter()
        .find(|p| (p.x * p.x + p.y * p.y).sqrt() > 1e-9 * scale)
    {
        let spin = if !upper_half {
            Some(rz(-p.y.atan2(p.x)))
        } else if p.y < 0.0 {
            Some(rz(PI))
        } else {
            None
        };
        if let Some(spin) = spin {
            for p in q.iter_mut() {
                *p = spin * *p;
            }
        }
    }
    q
}
