//! Geometry-induced camera topology.
//!
//! Cameras become graph nodes; the edge weight between two cameras is a
//! Gaussian kernel of their (optionally rotation-aligned) displacement.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};

/// Deviation from orthonormality accepted as-is.
pub const ROTATION_TOL: f64 = 1e-6;
/// Deviation from orthonormality repaired by polar decomposition; beyond this the pose is rejected.
pub const ROTATION_REPAIR_TOL: f64 = 1e-3;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub id: String,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none", with = "rotation_serde")]
    pub rotation: Option<Mat3>,
}

impl CameraPose {
    pub fn at(id: impl Into<String>, position: [f64; 3]) -> Self {
        Self { id: id.into(), position, rotation: None }
    }

    pub fn with_rotation(mut self, r: Mat3) -> Self {
        self.rotation = Some(r);
        self
    }

    /// Validates the pose, repairing slightly non-orthonormal rotations.
    fn validated(&self) -> Result<CameraPose> {
        if self.position.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPose { id: self.id.clone(), reason: "non-finite position".into() });
        }
        let Some(r) = self.rotation else { return Ok(self.clone()) };
        if r.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPose { id: self.id.clone(), reason: "non-finite rotation".into() });
        }
        let dev = orthonormality_error(&r);
        let det = det3(&r);
        if det <= 0.0 {
            return Err(Error::InvalidPose {
                id: self.id.clone(),
                reason: format!("rotation determinant {det:.6} is not positive"),
            });
        }
        let rotation = if dev <= ROTATION_TOL {
            r
        } else if dev <= ROTATION_REPAIR_TOL {
            polar_orthonormalize(&r)
        } else {
            return Err(Error::InvalidPose {
                id: self.id.clone(),
                reason: format!("rotation deviates from orthonormal by {dev:.3e}"),
            });
        };
        Ok(CameraPose { rotation: Some(rotation), ..self.clone() })
    }
}

/// Cameras plus their Gaussian affinity matrix. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraGraph {
    pub poses: Vec<CameraPose>,
    pub bandwidth_sigma: f64,
    #[serde(with = "matrix_serde")]
    pub affinity: Array2<f64>,
}

/// Camera layout document: `{"cameras": [...], "sigma_meters": σ}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraLayout {
    pub cameras: Vec<CameraPose>,
    pub sigma_meters: f64,
}

impl CameraLayout {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn build(&self) -> Result<CameraGraph> {
        build_adjacency(&self.cameras, self.sigma_meters)
    }
}

impl CameraGraph {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// L1 row normalization of the affinity matrix.
    pub fn row_normalized(&self) -> Array2<f64> {
        row_normalize(&self.affinity)
    }
}

/// Gaussian affinity `A_ij = exp(-‖R_ij p_i − p_j‖² / 2σ²)` with `R_ij = R_jᵀ R_i`
/// (identity when either camera lacks a rotation).
pub fn build_adjacency(poses: &[CameraPose], sigma: f64) -> Result<CameraGraph> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid_param(format!("sigma must be positive and finite, got {sigma}")));
    }
    if poses.is_empty() {
        return Err(invalid_param("at least one camera is required"));
    }
    let poses = poses.iter().map(CameraPose::validated).collect::<Result<Vec<_>>>()?;
    let n = poses.len();
    let two_sigma_sq = 2.0 * sigma * sigma;
    let mut affinity = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let aligned = match (poses[i].rotation, poses[j].rotation) {
                (Some(ri), Some(rj)) if i != j => mat_vec(&mat_mul(&transpose(&rj), &ri), &poses[i].position),
                _ => poses[i].position,
            };
            let d2: f64 = (0..3).map(|k| (aligned[k] - poses[j].position[k]).powi(2)).sum();
            affinity[[i, j]] = (-d2 / two_sigma_sq).exp();
        }
    }
    Ok(CameraGraph { poses, bandwidth_sigma: sigma, affinity })
}

/// Stated worst-case change of an identity-rotation affinity entry when one
/// camera moves by `delta_p_norm`: `1 − exp(−‖Δp‖² / 2σ²)`.
///
/// This expression is exact only for co-located cameras. For separated cameras
/// the true change is first order in ‖Δp‖ and can exceed it; see
/// [`lipschitz_perturbation_bound`] for a bound that always holds.
pub fn perturbation_bound(delta_p_norm: f64, sigma: f64) -> Result<f64> {
    check_perturbation_args(delta_p_norm, sigma)?;
    Ok(-(-delta_p_norm * delta_p_norm / (2.0 * sigma * sigma)).exp_m1())
}

/// Valid bound for any camera pair: the kernel `exp(−r²/2σ²)` has slope at most
/// `e^{-1/2}/σ` in r, and affinities live in (0, 1].
pub fn lipschitz_perturbation_bound(delta_p_norm: f64, sigma: f64) -> Result<f64> {
    check_perturbation_args(delta_p_norm, sigma)?;
    Ok(((-0.5f64).exp() * delta_p_norm / sigma).min(1.0))
}

fn check_perturbation_args(delta_p_norm: f64, sigma: f64) -> Result<()> {
    if !(delta_p_norm >= 0.0) {
        return Err(invalid_param(format!("perturbation norm must be nonnegative, got {delta_p_norm}")));
    }
    if !(sigma > 0.0) {
        return Err(invalid_param(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Plain L1 row normalization. Rows of an affinity matrix always carry positive mass.
pub fn row_normalize(a: &Array2<f64>) -> Array2<f64> {
    let mut s = a.clone();
    for mut row in s.rows_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        }
    }
    s
}

fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = mat_mul(&transpose(r), r);
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rtr[i][j] - target).abs());
        }
    }
    worst
}

/// Nearest rotation via the Newton iteration for the polar factor.
fn polar_orthonormalize(r: &Mat3) -> Mat3 {
    let mut x = *r;
    for _ in 0..50 {
        let inv_t = transpose(&inverse3(&x));
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (x[i][j] + inv_t[i][j]);
            }
        }
        let delta: f64 = (0..9).map(|k| (next[k / 3][k % 3] - x[k / 3][k % 3]).abs()).sum();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    x
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn inverse3(a: &Mat3) -> Mat3 {
    let d = det3(a);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
        }
    }
    inv
}

mod rotation_serde {
    use super::Mat3;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flat(Vec<f64>),
        Nested(Vec<Vec<f64>>),
    }

    pub fn serialize<S: Serializer>(r: &Option<Mat3>, s: S) -> Result<S::Ok, S::Error> {
        r.map(|m| m.iter().flatten().copied().collect::<Vec<_>>()).serialize(s)
    }

    /// Accepts nine row-major numbers, either flat or as three rows.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Mat3>, D::Error> {
        let Some(repr) = Option::<Repr>::deserialize(d)? else { return Ok(None) };
        let flat: Vec<f64> = match repr {
            Repr::Flat(v) => v,
            Repr::Nested(rows) => rows.into_iter().flatten().collect(),
        };
        if flat.len() != 9 {
            return Err(D::Error::custom(format!("rotation needs 9 numbers, got {}", flat.len())));
        }
        let mut m = [[0.0; 3]; 3];
        for (k, x) in flat.into_iter().enumerate() {
            m[k / 3][k % 3] = x;
        }
        Ok(Some(m))
    }
}

pub(crate) mod matrix_serde {
    use ndarray::Array2;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("ragged matrix"));
        }
        Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rot_z(theta: f64) -> Mat3 {
        let (s, c) = theta.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    #[test]
    fn coincident_cameras_have_unit_affinity() {
        let g = build_adjacency(&[CameraPose::at("a", [1.0, 2.0, 3.0]), CameraPose::at("b", [1.0, 2.0, 3.0])], 2.0)
            .unwrap();
        assert_eq!(g.affinity[[0, 1]], 1.0);
        assert_eq!(g.affinity[[0, 0]], 1.0);
    }

    #[test]
    fn distance_sigma_sqrt2_gives_inverse_e() {
        let s = 3.0;
        let g = build_adjacency(&[CameraPose::at("a", [0.0; 3]), CameraPose::at("b", [s * 2f64.sqrt(), 0.0, 0.0])], s)
            .unwrap();
        assert_abs_diff_eq!(g.affinity[[0, 1]], (-1f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(g.affinity[[0, 1]], 0.36788, epsilon = 1e-5);
    }

    #[test]
    fn collinear_triplet() {
        let s = 1.5;
        let poses: Vec<_> = (0..3).map(|k| CameraPose::at(format!("c{k}"), [k as f64 * s, 0.0, 0.0])).collect();
        let g = build_adjacency(&poses, s).unwrap();
        assert_abs_diff_eq!(g.affinity[[0, 1]], 0.60653, epsilon = 1e-5);
        assert_abs_diff_eq!(g.affinity[[1, 2]], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(g.affinity[[0, 2]], 0.13534, epsilon = 1e-5);
        assert_eq!(g.affinity, g.affinity.t());
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let p = [CameraPose::at("a", [0.0; 3])];
        assert!(matches!(build_adjacency(&p, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_adjacency(&p, -1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn rotations_are_checked_and_repaired() {
        let mut r = rot_z(0.3);
        r[0][0] += 5e-4;
        let g = build_adjacency(&[CameraPose::at("a", [0.0; 3]).with_rotation(r)], 1.0).unwrap();
        let fixed = g.poses[0].rotation.unwrap();
        assert!(orthonormality_error(&fixed) < 1e-12);
        assert!((det3(&fixed) - 1.0).abs() < 1e-12);

        let mut bad = rot_z(0.3);
        bad[0][0] += 0.1;
        let err = build_adjacency(&[CameraPose::at("a", [0.0; 3]).with_rotation(bad)], 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidPose { .. }));

        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let err = build_adjacency(&[CameraPose::at("a", [0.0; 3]).with_rotation(reflection)], 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidPose { .. }));
    }

    #[test]
    fn relative_rotation_aligns_frames() {
        // Camera b is rotated by 90° about z; R_ab = R_bᵀ R_a maps a's position into b's frame.
        let a = CameraPose::at("a", [1.0, 0.0, 0.0]).with_rotation(rot_z(0.0));
        let b = CameraPose::at("b", [0.0, -1.0, 0.0]).with_rotation(rot_z(std::f64::consts::FRAC_PI_2));
        let g = build_adjacency(&[a, b], 1.0).unwrap();
        assert_abs_diff_eq!(g.affinity[[0, 1]], 1.0, epsilon = 1e-12);
        assert_eq!(g.affinity[[0, 0]], 1.0);
    }

    #[test]
    fn perturbation_bound_values() {
        assert_eq!(perturbation_bound(0.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(perturbation_bound(2.0, 2.0).unwrap(), 0.39347, epsilon = 1e-5);
        let b = perturbation_bound(0.5, 5.0).unwrap();
        assert_abs_diff_eq!(b, 0.004988, epsilon = 1e-6);
        assert!(matches!(perturbation_bound(-0.1, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn row_normalize_examples() {
        let one = Array2::from_elem((1, 1), 1.0);
        assert_eq!(row_normalize(&one), one);
        let ones = Array2::from_elem((2, 2), 1.0);
        assert_eq!(row_normalize(&ones), Array2::from_elem((2, 2), 0.5));
        let e = (-1f64).exp();
        let a = ndarray::array![[1.0, e], [e, 1.0]];
        let s = row_normalize(&a);
        assert_abs_diff_eq!(s[[0, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(s[[1, 0]], 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn layout_json_accepts_nested_and_flat_rotations() {
        let doc = r#"{"cameras":[
            {"id":"a","position":[0,0,0],"rotation":[[1,0,0],[0,1,0],[0,0,1]]},
            {"id":"b","position":[1,0,0],"rotation":[1,0,0,0,1,0,0,0,1]},
            {"id":"c","position":[2,0,0]}],"sigma_meters":1.0}"#;
        let layout: CameraLayout = serde_json::from_str(doc).unwrap();
        let g = layout.build().unwrap();
        assert_eq!(g.len(), 3);
        let back: CameraGraph = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
