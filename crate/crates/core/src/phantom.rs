//! Calibration phantom: needle clusters inside a half-cylinder cavity.
//!
//! The phantom frame has its z axis on the cavity axis and its origin at the
//! cylinder center. Each cluster sits at a fixed azimuth; needles grow inward
//! from the cavity wall so a tip lies `radius - length` from the axis.

use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Cluster azimuths in degrees, measured from +x toward +y.
    pub cluster_angles_deg: Vec<f64>,
    pub needles_per_cluster: usize,
    /// Needle lengths in mm, one per needle within a cluster.
    pub needle_lengths_mm: Vec<f64>,
    pub cavity_radius_mm: f64,
    /// Axial (z) tip offsets in mm, one per needle within a cluster.
    pub axial_offsets_mm: Vec<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            cluster_angles_deg: vec![60.0, 90.0, 120.0],
            needles_per_cluster: 5,
            needle_lengths_mm: vec![10.0, 30.0, 50.0, 20.0, 40.0],
            cavity_radius_mm: 65.0,
            axial_offsets_mm: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.needles_per_cluster;
        if self.cluster_angles_deg.is_empty() || n == 0 {
            return Err(Error::InvalidSpec(
                "need at least one cluster and one needle per cluster".into(),
            ));
        }
        if self.needle_lengths_mm.len() != n || self.axial_offsets_mm.len() != n {
            return Err(Error::InvalidSpec(format!(
                "expected {n} needle lengths and {n} axial offsets, got {} and {}",
                self.needle_lengths_mm.len(),
                self.axial_offsets_mm.len()
            )));
        }
        let r = self.cavity_radius_mm;
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "cavity radius must be > 0, got {r}"
            )));
        }
        for &len in &self.needle_lengths_mm {
            if !(len.is_finite() && len > 0.0 && len < r) {
                return Err(Error::InvalidSpec(format!(
                    "needle length {len} mm must lie in (0, {r}) mm"
                )));
            }
        }
        let finite = self
            .cluster_angles_deg
            .iter()
            .chain(&self.axial_offsets_mm)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidSpec("non-finite angle or offset".into()));
        }
        Ok(())
    }
}

/// Needle-tip landmarks in the phantom frame, indexed by landmark id.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomModel {
    landmarks: Vec<Point3>,
    spec: Option<PhantomSpec>,
}

impl PhantomModel {
    /// Landmark `i` gets id `i`.
    pub fn from_landmarks(landmarks: Vec<Point3>) -> Result<Self> {
        if landmarks.is_empty() {
            return Err(Error::InvalidSpec("phantom has no landmarks".into()));
        }
        if !landmarks.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidSpec("phantom landmark is not finite".into()));
        }
        Ok(Self {
            landmarks,
            spec: None,
        })
    }

    pub fn landmarks(&self) -> &[Point3] {
        &self.landmarks
    }

    pub fn landmark(&self, id: u32) -> Option<&Point3> {
        self.landmarks.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn spec(&self) -> Option<&PhantomSpec> {
        self.spec.as_ref()
    }

    /// Distinct landmark azimuths (radians), grouped within `tol` and averaged.
    /// Landmarks on the axis have no azimuth and are skipped.
    pub fn azimuths(&self, tol: f64) -> Vec<f64> {
        let mut angles: Vec<f64> = self
            .landmarks
            .iter()
            .filter(|p| p.x.hypot(p.y) > 1e-9)
            .map(|p| p.y.atan2(p.x))
            .collect();
        angles.sort_by(f64::total_cmp);
        let mut groups: Vec<(f64, usize, f64)> = Vec::new();
        for a in angles {
            match groups.last_mut() {
                Some((sum, count, last)) if a - *last <= tol => {
                    *sum += a;
                    *count += 1;
                    *last = a;
                }
                _ => groups.push((a, 1, a)),
            }
        }
        groups
            .into_iter()
            .map(|(sum, n, _)| sum / n as f64)
            .collect()
    }
}

pub fn build_phantom(spec: &PhantomSpec) -> Result<PhantomModel> {
    spec.validate()?;
    let r = spec.cavity_radius_mm;
    let mut landmarks =
        Vec::with_capacity(spec.cluster_angles_deg.len() * spec.needles_per_cluster);
    for &angle in &spec.cluster_angles_deg {
        let (sin, cos) = angle.to_radians().sin_cos();
        for (len, offset) in spec.needle_lengths_mm.iter().zip(&spec.axial_offsets_mm) {
            let rho = r - len;
            landmarks.push(Point3::new(rho * cos, rho * sin, *offset));
        }
    }
    Ok(PhantomModel {
        landmarks,
        spec: Some(spec.clone()),
    })
}

pub fn default_phantom() -> PhantomModel {
    build_phantom(&PhantomSpec::default()).expect("default phantom spec is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_fifteen_landmarks() {
        let p = default_phantom();
        assert_eq!(p.len(), 15);
        let spec = p.spec().unwrap();
        let min = spec
            .needle_lengths_mm
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let max = spec.needle_lengths_mm.iter().cloned().fold(0.0, f64::max);
        assert_eq!((min, max), (10.0, 50.0));
    }

    #[test]
    fn ninety_degree_cluster_first_needle() {
        let spec = PhantomSpec {
            cluster_angles_deg: vec![90.0],
            needles_per_cluster: 1,
            needle_lengths_mm: vec![10.0],
            cavity_radius_mm: 65.0,
            axial_offsets_mm: vec![0.0],
        };
        let tip = build_phantom(&spec).unwrap().landmarks()[0];
        assert!((tip - Point3::new(0.0, 55.0, 0.0)).norm() <= 1e-12);
    }

    #[test]
    fn needle_length_must_stay_inside_cavity() {
        let mut spec = PhantomSpec {
            cluster_angles_deg: vec![0.0],
            needles_per_cluster: 1,
            needle_lengths_mm: vec![65.0],
            cavity_radius_mm: 65.0,
            axial_offsets_mm: vec![2.0],
        };
        assert!(matches!(build_phantom(&spec), Err(Error::InvalidSpec(_))));
        spec.needle_lengths_mm = vec![64.999];
        let tip = build_phantom(&spec).unwrap().landmarks()[0];
        assert!((tip - Point3::new(0.001, 0.0, 2.0)).norm() <= 1e-12);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut spec = PhantomSpec::default();
        spec.axial_offsets_mm.pop();
        assert!(build_phantom(&spec).is_err());
        let spec = PhantomSpec {
            cavity_radius_mm: 0.0,
            ..PhantomSpec::default()
        };
        assert!(build_phantom(&spec).is_err());
    }

    #[test]
    fn ids_are_cluster_major() {
        let p = default_phantom();
        for (i, tip) in p.landmarks().iter().enumerate() {
            let cluster = i / 5;
            let az = tip.y.atan2(tip.x).to_degrees();
            assert!((az - [60.0, 90.0, 120.0][cluster]).abs() < 1e-9);
        }
    }

    #[test]
    fn default_tips_within_depth_window_and_asymmetric() {
        let p = default_phantom();
        for tip in p.landmarks() {
            let rho = tip.x.hypot(tip.y);
            assert!((15.0 - 1e-9..=55.0 + 1e-9).contains(&rho));
        }
        let spec = p.spec().unwrap();
        let mut pairs: Vec<_> = spec
            .needle_lengths_mm
            .iter()
            .zip(&spec.axial_offsets_mm)
            .map(|(l, a)| (l.to_bits(), a.to_bits()))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 5);
    }

    #[test]
    fn deterministic_build() {
        let a = build_phantom(&PhantomSpec::default()).unwrap();
        let b = build_phantom(&PhantomSpec::default()).unwrap();
        let bits = |m: &PhantomModel| -> Vec<u64> {
            m.landmarks()
                .iter()
                .flat_map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn azimuth_groups_match_clusters() {
        let az = default_phantom().azimuths(1e-6);
        assert_eq!(az.len(), 3);
        for (a, e) in az.iter().zip([60.0f64, 90.0, 120.0]) {
            assert!((a.to_degrees() - e).abs() < 1e-9);
        }
    }
}
