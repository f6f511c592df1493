use crate::geom::Vec3;
use crate::volgrid::Volume;

use super::BalloonParams;

/// Grey values along `vertex + t·normal`, `t` in `[-L/2, L/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub t0: f64,
    pub step: f64,
    pub samples: Vec<f64>,
}

impl Profile {
    pub fn offset(&self, i: f64) -> f64 {
        self.t0 + i * self.step
    }
}

pub fn sample_profile(vol: &Volume, vertex: &Vec3, normal: &Vec3, params: &BalloonParams) -> Profile {
    let half = params.profile_length_mm / 2.0;
    let n = (params.profile_length_mm / params.profile_step_mm).round() as usize;
    let step = params.profile_length_mm / n as f64;
    let samples = (0..=n)
        .map(|i| vol.sample_trilinear(&(vertex + normal * (-half + i as f64 * step))))
        .collect();
    Profile { t0: -half, step, samples }
}

/// Peaks of `s` above `floor`: `(position, value)`, plateaus reported at
/// their center, single-sample peaks refined by a parabola.
fn peaks(s: &[Option<f64>], floor: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let n = s.len();
    let mut i = 0;
    while i < n {
        let Some(v) = s[i] else {
            i += 1;
            continue;
        };
        let mut j = i;
        while j + 1 < n && s[j + 1] == Some(v) {
            j += 1;
        }
        let left = if i > 0 { s[i - 1] } else { None };
        let right = if j + 1 < n { s[j + 1] } else { None };
        let is_peak = v >= floor && left.is_none_or(|l| l < v) && right.is_none_or(|r| r < v);
        if is_peak {
            let pos = match (left, right) {
                (Some(l), Some(r)) if i == j => {
                    let denom = l - 2.0 * v + r;
                    if denom < 0.0 {
                        i as f64 + 0.5 * (l - r) / denom
                    } else {
                        i as f64
                    }
                }
                _ => (i + j) as f64 / 2.0,
            };
            out.push((pos, v));
        }
        i = j + 1;
    }
    out
}

/// Edge offset `t*` on a profile restricted to the samples flagged in
/// `valid`. The periosteal edge is the first dominant falling edge (bright
/// inside, dark outside) walking outward; without any falling edge above the
/// floor the strongest rising edge is used.
pub fn find_edge_target_in(profile: &Profile, valid: &[bool], params: &BalloonParams) -> Option<f64> {
    let s = &profile.samples;
    let n = s.len();
    if n < 3 {
        return None;
    }
    let k = ((params.derivative_halfwidth_mm / profile.step).round() as usize).max(1);
    let span = 2.0 * k as f64 * profile.step;
    let deriv: Vec<Option<f64>> = (0..n)
        .map(|i| {
            if i < k || i + k >= n || !(i - k..=i + k).all(|q| valid[q]) {
                None
            } else {
                Some((s[i + k] - s[i - k]) / span)
            }
        })
        .collect();

    let falling: Vec<Option<f64>> = deriv.iter().map(|d| d.map(|v| -v)).collect();
    let fall_peaks = peaks(&falling, params.edge_floor);
    if let Some(max) = fall_peaks.iter().map(|p| p.1).reduce(f64::max) {
        let first = fall_peaks.iter().find(|p| p.1 >= params.dominance * max)?;
        return Some(profile.offset(first.0));
    }
    let rise_peaks = peaks(&deriv, params.edge_floor);
    rise_peaks
        .iter()
        .fold(None::<(f64, f64)>, |best, &p| match best {
            Some(b) if b.1 >= p.1 => Some(b),
            _ => Some(p),
        })
        .map(|p| profile.offset(p.0))
}

pub fn find_edge_target(profile: &Profile, params: &BalloonParams) -> Option<f64> {
    find_edge_target_in(profile, &vec![true; profile.samples.len()], params)
}
