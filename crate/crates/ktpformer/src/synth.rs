//! Synthetic motion clips: forward kinematics over a tree skeleton with
//! sum-of-sinusoid joint angles, projected to normalized image coordinates.
//!
//! The 3D output is absolute camera-space millimetres; the 2D output is
//! the pinhole projection `(X/Z, Y/Z)` in `norm` units, optionally with
//! Gaussian pixel noise scaled by the focal length. Bone lengths are exact
//! by construction, and every generated frame is checked for positive
//! depth and non-coincident joints before it is accepted.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::clip::PoseSequence;
use crate::config::scan_pairs;
use crate::error::{io_err, KtpError, Result};
use crate::tensor::Tensor;
use crate::topology::Skeleton;

/// Joints closer than this to the camera plane make a frame invalid.
const MIN_DEPTH_MM: f64 = 100.0;
/// Joint pairs closer than this make a frame invalid.
const MIN_SEPARATION_MM: f64 = 1.0;
/// Root wobble amplitude per unit of `amplitude`, millimetres.
const ROOT_WOBBLE_MM: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    /// Skeleton file path; `None` selects the bundled 17-joint skeleton.
    pub skeleton: Option<String>,
    /// Millimetres per bone in skeleton edge order; empty selects defaults.
    pub bone_lengths: Vec<f64>,
    pub harmonics: usize,
    /// Joint angle excursion bound, radians.
    pub amplitude: f64,
    /// Focal length in pixels; converts pixel noise to norm units.
    pub focal: f64,
    /// Root distance from the camera, millimetres.
    pub camera_distance: f64,
    /// Gaussian noise on projected coordinates, pixels.
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            seed: 7,
            frames: 27,
            skeleton: None,
            bone_lengths: Vec::new(),
            harmonics: 3,
            amplitude: 0.5,
            focal: 1145.0,
            camera_distance: 4000.0,
            noise_std: 0.0,
        }
    }
}

/// Bone lengths for the bundled 17-joint skeleton, millimetres, edge order.
const H36M17_BONE_MM: [f64; 16] = [
    130.0, 440.0, 440.0, 130.0, 440.0, 440.0, 230.0, 250.0, 120.0, 110.0, 150.0, 280.0, 250.0,
    150.0, 280.0, 250.0,
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(KtpError::Validation("frames must be >= 1".into()));
        }
        if self.harmonics == 0 {
            return Err(KtpError::Validation("harmonics must be >= 1".into()));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("focal", self.focal),
            ("camera_distance", self.camera_distance),
            ("noise_std", self.noise_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(KtpError::Validation(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.focal == 0.0 || self.camera_distance == 0.0 {
            return Err(KtpError::Validation(
                "focal and camera_distance must be positive".into(),
            ));
        }
        if self.bone_lengths.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(KtpError::Validation("bone lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn load_skeleton(&self) -> Result<Skeleton> {
        match &self.skeleton {
            None => Ok(Skeleton::default_h36m17()),
            Some(path) => Skeleton::load(Path::new(path)),
        }
    }
}

/// Tree structure for forward kinematics: each non-root joint with its
/// parent and the skeleton edge index supplying the bone length.
struct KinematicTree {
    /// (child, parent, edge index) in traversal order from the root.
    order: Vec<(usize, usize, usize)>,
}

fn build_tree(skeleton: &Skeleton) -> Result<KinematicTree> {
    let n = skeleton.joints();
    if skeleton.edges.len() != n - 1 {
        return Err(KtpError::Validation(format!(
            "synthesis needs a tree skeleton: {} joints want {} bones, found {}",
            n,
            n - 1,
            skeleton.edges.len()
        )));
    }
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, &(a, b)) in skeleton.edges.iter().enumerate() {
        adjacency[a].push((b, e));
        adjacency[b].push((a, e));
    }
    let mut order = Vec::with_capacity(n - 1);
    let mut visited = HashSet::from([0usize]);
    let mut frontier = vec![0usize];
    while let Some(parent) = frontier.pop() {
        for &(child, edge) in &adjacency[parent] {
            if visited.insert(child) {
                order.push((child, parent, edge));
                frontier.push(child);
            }
        }
    }
    if visited.len() != n {
        let missing = (0..n).find(|j| !visited.contains(j)).expect("some joint unreached");
        return Err(KtpError::Validation(format!(
            "skeleton is disconnected: joint {missing} ({}) is unreachable from the root",
            skeleton.joint_names[missing]
        )));
    }
    Ok(KinematicTree { order })
}

struct BoneMotion {
    rest: Vector3<f64>,
    /// (amplitude, phase) per harmonic for the two rotation channels.
    z_terms: Vec<(f64, f64)>,
    x_terms: Vec<(f64, f64)>,
}

/// Generate one synthetic clip pair: `(2D norm, 3D mm)`.
pub fn synthesize(spec: &SynthSpec) -> Result<(PoseSequence, PoseSequence)> {
    spec.validate()?;
    let skeleton = spec.load_skeleton()?;
    let n = skeleton.joints();
    let tree = build_tree(&skeleton)?;

    let lengths: Vec<f64> = if spec.bone_lengths.is_empty() {
        if skeleton == Skeleton::default_h36m17() {
            H36M17_BONE_MM.to_vec()
        } else {
            vec![350.0; skeleton.edges.len()]
        }
    } else {
        if spec.bone_lengths.len() != skeleton.edges.len() {
            return Err(KtpError::Validation(format!(
                "{} bone lengths for {} skeleton edges",
                spec.bone_lengths.len(),
                skeleton.edges.len()
            )));
        }
        spec.bone_lengths.clone()
    };

    let stream = |id: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(id);
        rng
    };
    let mut rest_rng = stream(0);
    let mut motion_rng = stream(1);
    let mut noise_rng = stream(2);

    let tau = std::f64::consts::TAU;
    let mut bones: Vec<BoneMotion> = Vec::with_capacity(skeleton.edges.len());
    for _ in &tree.order {
        let dir: [f64; 3] = UnitSphere.sample(&mut rest_rng);
        let terms = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
            (0..spec.harmonics)
                .map(|_| {
                    (
                        rng.gen_range(0.0..spec.amplitude.max(f64::MIN_POSITIVE))
                            / spec.harmonics as f64,
                        rng.gen_range(0.0..tau),
                    )
                })
                .collect()
        };
        bones.push(BoneMotion {
            rest: Vector3::new(dir[0], dir[1], dir[2]),
            z_terms: terms(&mut motion_rng),
            x_terms: terms(&mut motion_rng),
        });
    }
    let root_phases: Vec<f64> = (0..3).map(|_| motion_rng.gen_range(0.0..tau)).collect();

    let noise = Normal::new(0.0, spec.noise_std / spec.focal)
        .map_err(|e| KtpError::Validation(format!("bad noise parameters: {e}")))?;

    let t_frames = spec.frames;
    let mut data3 = Vec::with_capacity(t_frames * n * 3);
    let mut data2 = Vec::with_capacity(t_frames * n * 2);
    let mut positions = vec![Vector3::zeros(); n];
    for frame in 0..t_frames {
        let clock = frame as f64 / t_frames as f64;
        let wobble = spec.amplitude * ROOT_WOBBLE_MM;
        positions[0] = Vector3::new(
            wobble * (tau * clock + root_phases[0]).sin(),
            wobble * (tau * clock + root_phases[1]).sin(),
            spec.camera_distance + wobble * (tau * clock + root_phases[2]).sin(),
        );
        for (slot, &(child, parent, edge)) in tree.order.iter().enumerate() {
            let bone = &bones[slot];
            let angle = |terms: &[(f64, f64)]| -> f64 {
                terms
                    .iter()
                    .enumerate()
                    .map(|(k, (a, phi))| a * (tau * (k + 1) as f64 * clock + phi).sin())
                    .sum()
            };
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle(&bone.z_terms))
                * Rotation3::from_axis_angle(&Vector3::x_axis(), angle(&bone.x_terms));
            positions[child] = positions[parent] + rot * bone.rest * lengths[edge];
        }

        for (j, p) in positions.iter().enumerate() {
            if p.z < MIN_DEPTH_MM {
                return Err(KtpError::Validation(format!(
                    "frame {frame}: joint {j} ({}) at depth {:.1} mm is behind the \
                     minimum plane; lower amplitude or move the camera back",
                    skeleton.joint_names[j], p.z
                )));
            }
        }
        for a in 0..n {
            for b in a + 1..n {
                let d = (positions[a] - positions[b]).norm();
                if d < MIN_SEPARATION_MM {
                    return Err(KtpError::Validation(format!(
                        "frame {frame}: joints {a} ({}) and {b} ({}) nearly coincide \
                         ({d:.3} mm apart); try another seed",
                        skeleton.joint_names[a], skeleton.joint_names[b]
                    )));
                }
            }
        }

        for p in &positions {
            data3.extend_from_slice(&[p.x, p.y, p.z]);
            let mut u = p.x / p.z;
            let mut v = p.y / p.z;
            if spec.noise_std > 0.0 {
                u += noise.sample(&mut noise_rng);
                v += noise.sample(&mut noise_rng);
            }
            data2.extend_from_slice(&[u, v]);
        }
    }

    let clip3 = PoseSequence::new("mm", Tensor::new(vec![t_frames, n, 3], data3)?)?;
    let clip2 = PoseSequence::new("norm", Tensor::new(vec![t_frames, n, 2], data2)?)?;
    Ok((clip2, clip3))
}

// ---- spec file format ----

const SYNTH_KEYS: [&str; 9] = [
    "seed",
    "frames",
    "skeleton",
    "bone_lengths",
    "harmonics",
    "amplitude",
    "focal",
    "camera_distance",
    "noise_std",
];

pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    let mut seen = HashSet::new();
    for (key, value, off) in scan_pairs(text)? {
        if !seen.insert(key.clone()) {
            return Err(KtpError::Parse {
                offset: off,
                message: format!("duplicate key `{key}`"),
            });
        }
        let bad = |what: &str| KtpError::Parse {
            offset: off,
            message: format!("{key}: `{value}` is not {what}"),
        };
        match key.as_str() {
            "seed" => spec.seed = value.parse().map_err(|_| bad("a seed"))?,
            "frames" => spec.frames = value.parse().map_err(|_| bad("a count"))?,
            "skeleton" => {
                spec.skeleton = if value == "default" {
                    None
                } else {
                    Some(value.to_string())
                };
            }
            "bone_lengths" => {
                if value == "default" {
                    spec.bone_lengths = Vec::new();
                } else {
                    let ls: std::result::Result<Vec<f64>, _> =
                        value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    spec.bone_lengths = ls.map_err(|_| bad("a comma-separated number list"))?;
                }
            }
            "harmonics" => spec.harmonics = value.parse().map_err(|_| bad("a count"))?,
            "amplitude" => spec.amplitude = value.parse().map_err(|_| bad("a number"))?,
            "focal" => spec.focal = value.parse().map_err(|_| bad("a number"))?,
            "camera_distance" => {
                spec.camera_distance = value.parse().map_err(|_| bad("a number"))?;
            }
            "noise_std" => spec.noise_std = value.parse().map_err(|_| bad("a number"))?,
            other => {
                return Err(KtpError::Parse {
                    offset: off,
                    message: format!(
                        "unknown key `{other}` (known keys: {})",
                        SYNTH_KEYS.join(", ")
                    ),
                });
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn serialize_synth_spec(spec: &SynthSpec) -> String {
    let bones = if spec.bone_lengths.is_empty() {
        "default".to_string()
    } else {
        spec.bone_lengths
            .iter()
            .map(|l| format!("{l}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "seed = {}\nframes = {}\nskeleton = {}\nbone_lengths = {}\nharmonics = {}\n\
         amplitude = {}\nfocal = {}\ncamera_distance = {}\nnoise_std = {}\n",
        spec.seed,
        spec.frames,
        spec.skeleton.as_deref().unwrap_or("default"),
        bones,
        spec.harmonics,
        spec.amplitude,
        spec.focal,
        spec.camera_distance,
        spec.noise_std,
    )
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_synth_spec(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SynthSpec::default();
        let (a2, a3) = synthesize(&spec).unwrap();
        let (b2, b3) = synthesize(&spec).unwrap();
        assert_eq!(a2, b2);
        assert_eq!(a3, b3);
        let mut other = spec.clone();
        other.seed = 8;
        let (c2, _) = synthesize(&other).unwrap();
        assert_ne!(a2.data.data(), c2.data.data());
    }

    #[test]
    fn output_shapes_and_units() {
        let mut spec = SynthSpec::default();
        spec.frames = 5;
        let (c2, c3) = synthesize(&spec).unwrap();
        assert_eq!(c2.data.shape(), &[5, 17, 2]);
        assert_eq!(c3.data.shape(), &[5, 17, 3]);
        assert_eq!(c2.unit, "norm");
        assert_eq!(c3.unit, "mm");
    }

    #[test]
    fn bone_lengths_are_exact_every_frame() {
        let spec = SynthSpec::default();
        let skeleton = spec.load_skeleton().unwrap();
        let (_, c3) = synthesize(&spec).unwrap();
        let n = skeleton.joints();
        for frame in 0..spec.frames {
            for (e, &(a, b)) in skeleton.edges.iter().enumerate() {
                let pa = &c3.data.data()[(frame * n + a) * 3..(frame * n + a) * 3 + 3];
                let pb = &c3.data.data()[(frame * n + b) * 3..(frame * n + b) * 3 + 3];
                let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)
                    + (pa[2] - pb[2]).powi(2))
                .sqrt();
                let rel = (len - H36M17_BONE_MM[e]).abs() / H36M17_BONE_MM[e];
                assert!(rel <= 1e-9, "frame {frame} edge {e}: {len} vs {}", H36M17_BONE_MM[e]);
            }
        }
    }

    #[test]
    fn noiseless_projection_reproduces_exactly() {
        let mut spec = SynthSpec::default();
        spec.noise_std = 0.0;
        spec.frames = 3;
        let (c2, c3) = synthesize(&spec).unwrap();
        for j in 0..c2.data.numel() / 2 {
            let x = c3.data.data()[j * 3];
            let y = c3.data.data()[j * 3 + 1];
            let z = c3.data.data()[j * 3 + 2];
            assert_eq!(c2.data.data()[j * 2].to_bits(), (x / z).to_bits());
            assert_eq!(c2.data.data()[j * 2 + 1].to_bits(), (y / z).to_bits());
        }
    }

    #[test]
    fn noise_moves_projection_but_not_geometry() {
        let mut clean = SynthSpec::default();
        clean.frames = 3;
        let mut noisy = clean.clone();
        noisy.noise_std = 2.0;
        let (c2, c3) = synthesize(&clean).unwrap();
        let (n2, n3) = synthesize(&noisy).unwrap();
        assert_eq!(c3, n3);
        assert_ne!(c2.data.data(), n2.data.data());
        // noise scale: 2 px at focal 1145 is about 1.7e-3 norm units
        let max_shift = c2
            .data
            .data()
            .iter()
            .zip(n2.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_shift < 2e-2, "noise too large: {max_shift}");
        assert!(max_shift > 0.0);
    }

    #[test]
    fn depth_stays_positive_and_joints_stay_apart() {
        let spec = SynthSpec::default();
        let (_, c3) = synthesize(&spec).unwrap();
        for p in c3.data.data().chunks_exact(3) {
            assert!(p[2] >= MIN_DEPTH_MM);
        }
        // excessive amplitude at a short camera distance must be rejected
        let mut bad = SynthSpec::default();
        bad.camera_distance = 300.0;
        bad.amplitude = 3.0;
        let err = synthesize(&bad).unwrap_err();
        assert!(err.to_string().contains("depth") || err.to_string().contains("coincide"));
    }

    #[test]
    fn tree_validation_rejects_non_tree_skeletons() {
        let text = "ktp-skel v1 3\n0 a\n1 b\n2 c\nedges:\n0 1\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.skel");
        std::fs::write(&path, text).unwrap();
        let mut spec = SynthSpec::default();
        spec.skeleton = Some(path.to_string_lossy().into_owned());
        let err = synthesize(&spec).unwrap_err();
        assert!(err.to_string().contains("tree"), "{err}");
    }

    #[test]
    fn spec_roundtrip_and_unknown_keys() {
        let mut spec = SynthSpec::default();
        spec.seed = 99;
        spec.bone_lengths = vec![100.0; 16];
        spec.noise_std = 1.5;
        let text = serialize_synth_spec(&spec);
        let back = parse_synth_spec(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(serialize_synth_spec(&back), text);
        assert!(parse_synth_spec("focal_length = 100\n").is_err());
        assert!(parse_synth_spec("frames = 0\n").is_err());
        assert_eq!(parse_synth_spec("").unwrap(), SynthSpec::default());
    }

    #[test]
    fn custom_bone_lengths_are_respected() {
        let mut spec = SynthSpec::default();
        spec.bone_lengths = vec![200.0; 16];
        let skeleton = spec.load_skeleton().unwrap();
        let (_, c3) = synthesize(&spec).unwrap();
        let n = skeleton.joints();
        let (a, b) = skeleton.edges[0];
        let pa = &c3.data.data()[a * 3..a * 3 + 3];
        let pb = &c3.data.data()[b * 3..b * 3 + 3];
        let len =
            ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt();
        assert!((len - 200.0).abs() < 1e-9);
        assert!(n == 17);
        spec.bone_lengths = vec![200.0; 3];
        assert!(synthesize(&spec).is_err());
    }
}
