//! Synthetic driving scenes with collision labels from a kinematic oracle.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_bundle, DatasetManifest, FeatureBundle, Label, VideoSample, NO_ACCIDENT, OBJECT_SLOTS,
};
use crate::error::{Error, Result};
use crate::geometry::{diag_norm, pairwise_distance3d, GeometryConfig};

/// Inputs to the embedding: `(cx, cy, depth, vx, vy)`.
pub const EMBED_INPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub num_agents: usize,
    pub num_frames: usize,
    pub fps: u32,
    pub width: u32,
    pub height: u32,
    /// Metres.
    pub depth_min: f64,
    pub depth_max: f64,
    /// Pixel-plane speed range, pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Largest depth rate, metres per frame.
    pub depth_speed_max: f64,
    /// Normalized 3D distance below which two agents collide.
    pub collision_threshold: f64,
    /// Negatives keep every pair at least `negative_margin * collision_threshold` apart.
    pub negative_margin: f64,
    /// Earliest accepted accident frame.
    pub min_toa: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Box side length, pixels.
    pub box_size: f64,
    pub seed: u64,
    /// Seeds the embedding map, shared by every scenario of a dataset.
    pub embedding_seed: u64,
    /// Candidate draws per scenario before giving up.
    pub max_attempts: usize,
    /// Spread agents over random slots instead of filling the leading ones.
    pub scatter_slots: bool,
    /// Negatives also require every pairwise distance to be non-decreasing.
    pub receding_negatives: bool,
    pub geometry: GeometryConfig,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            num_agents: 4,
            num_frames: 50,
            fps: 10,
            width: 1280,
            height: 720,
            depth_min: 10.0,
            depth_max: 50.0,
            speed_min: 4.0,
            speed_max: 14.0,
            depth_speed_max: 0.2,
            collision_threshold: 0.05,
            negative_margin: 2.0,
            min_toa: 15,
            feature_dim: 32,
            noise_std: 0.05,
            box_size: 40.0,
            seed: 0,
            embedding_seed: 0,
            max_attempts: 1000,
            scatter_slots: false,
            receding_negatives: true,
            geometry: GeometryConfig::default(),
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("scenario params: {m}")));
        if !(2..=OBJECT_SLOTS).contains(&self.num_agents) {
            return bad("num_agents must be in [2, 19]");
        }
        if self.num_frames < 2 || self.fps == 0 || self.width == 0 || self.height == 0 {
            return bad("num_frames >= 2, fps, width and height must be positive");
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad("depth range must satisfy 0 < depth_min < depth_max");
        }
        if !(self.speed_min >= 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range must satisfy 0 <= speed_min <= speed_max");
        }
        if !(self.depth_speed_max >= 0.0) {
            return bad("depth_speed_max must be >= 0");
        }
        if !(self.collision_threshold > 0.0) {
            return bad("collision_threshold must be > 0");
        }
        if !(self.negative_margin >= 1.0) {
            return bad("negative_margin must be >= 1");
        }
        if self.min_toa + 4 >= self.num_frames {
            return bad("min_toa leaves no room for an accident");
        }
        if self.feature_dim == 0 || !(self.noise_std >= 0.0) || !(self.box_size > 0.0) {
            return bad("feature_dim, noise_std and box_size out of range");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }

    fn diagonal(&self) -> f64 {
        diag_norm(
            f64::from(self.width),
            f64::from(self.height),
            self.geometry.fixed_diagonal,
        )
    }
}

/// Per-frame agent states, `agents[i][t] = [cx, cy, depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    pub width: u32,
    pub height: u32,
    pub agents: Vec<Vec<[f64; 3]>>,
}

impl Trajectories {
    pub fn num_frames(&self) -> usize {
        self.agents.first().map_or(0, Vec::len)
    }

    /// Reads the present slots of a bundle (box centers and depth).
    pub fn from_bundle(bundle: &FeatureBundle) -> Self {
        let slots: Vec<usize> = (0..bundle.num_objects)
            .filter(|&i| (0..bundle.num_frames).all(|t| bundle.present(t, i)))
            .collect();
        let agents = slots
            .iter()
            .map(|&i| {
                (0..bundle.num_frames)
                    .map(|t| {
                        let b = bundle.bbox(t, i).map(f64::from);
                        [
                            (b[0] + b[2]) / 2.0,
                            (b[1] + b[3]) / 2.0,
                            f64::from(bundle.depth(t, i)),
                        ]
                    })
                    .collect()
            })
            .collect();
        Trajectories {
            width: bundle.width,
            height: bundle.height,
            agents,
        }
    }

    /// `[T]` smallest pairwise normalized 3D distance, `None` with fewer than two agents.
    pub fn min_distances(&self, geometry: &GeometryConfig) -> Vec<Option<f64>> {
        let n = self.agents.len();
        let t_len = self.num_frames();
        let d_d = diag_norm(
            f64::from(self.width),
            f64::from(self.height),
            geometry.fixed_diagonal,
        );
        let mut centers = Vec::with_capacity(t_len * n);
        let mut depths = Vec::with_capacity(t_len * n);
        for t in 0..t_len {
            for a in &self.agents {
                centers.push([a[t][0], a[t][1]]);
                depths.push(a[t][2]);
            }
        }
        let present = vec![true; t_len * n];
        let dist = pairwise_distance3d(&centers, &depths, &present, n, d_d, geometry.depth_scale);
        (0..t_len)
            .map(|t| {
                let mut best: Option<f64> = None;
                for i in 0..n {
                    for j in i + 1..n {
                        let d = dist[(t * n + i) * n + j];
                        best = Some(best.map_or(d, |b: f64| b.min(d)));
                    }
                }
                best
            })
            .collect()
    }
}

impl Trajectories {
    /// True when no pairwise distance ever shrinks from one frame to the next.
    pub fn all_pairs_receding(&self, geometry: &GeometryConfig) -> bool {
        let d_d = diag_norm(
            f64::from(self.width),
            f64::from(self.height),
            geometry.fixed_diagonal,
        );
        let dist = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]) / d_d)
                .hypot((a[1] - b[1]) / d_d)
                .hypot((a[2] - b[2]) / geometry.depth_scale)
        };
        let n = self.agents.len();
        (0..n).all(|i| {
            (i + 1..n).all(|j| {
                (1..self.num_frames()).all(|t| {
                    dist(self.agents[i][t], self.agents[j][t])
                        >= dist(self.agents[i][t - 1], self.agents[j][t - 1])
                })
            })
        })
    }
}

/// Earliest frame whose closest pair is nearer than `threshold`.
pub fn oracle_label(
    traj: &Trajectories,
    threshold: f64,
    geometry: &GeometryConfig,
) -> (Label, i64) {
    for (t, d) in traj.min_distances(geometry).into_iter().enumerate() {
        if matches!(d, Some(d) if d < threshold) {
            return (Label::Positive, t as i64);
        }
    }
    (Label::Negative, NO_ACCIDENT)
}

/// Fixed linear map from the 5 kinematic inputs to `feature_dim` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub feature_dim: usize,
    /// Row-major `[feature_dim, 5]`.
    pub weights: Vec<f64>,
}

impl Embedding {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (EMBED_INPUTS as f64).sqrt();
        let weights = (0..feature_dim * EMBED_INPUTS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Embedding {
            feature_dim,
            weights,
        }
    }

    pub fn apply(&self, input: &[f64; EMBED_INPUTS]) -> Vec<f64> {
        self.weights
            .chunks(EMBED_INPUTS)
            .map(|w| w.iter().zip(input).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Scaled kinematic state fed to the embedding.
pub fn embedding_input(
    params: &ScenarioParams,
    pos: [f64; 3],
    vel: [f64; 2],
) -> [f64; EMBED_INPUTS] {
    let mid = (params.depth_min + params.depth_max) / 2.0;
    let span = params.depth_max - params.depth_min;
    let vmax = params.speed_max.max(1e-9);
    [
        pos[0] / f64::from(params.width) - 0.5,
        pos[1] / f64::from(params.height) - 0.5,
        (pos[2] - mid) / span,
        vel[0] / vmax,
        vel[1] / vmax,
    ]
}

#[derive(Debug, Clone, Copy)]
struct Agent {
    pos: [f64; 3],
    vel: [f64; 3],
}

impl Agent {
    fn at(&self, t: f64) -> [f64; 3] {
        [
            self.pos[0] + self.vel[0] * t,
            self.pos[1] + self.vel[1] * t,
            self.pos[2] + self.vel[2] * t,
        ]
    }
}

fn random_velocity(rng: &mut ChaCha8Rng, p: &ScenarioParams, angle: f64) -> [f64; 3] {
    let speed = rng.random_range(p.speed_min..=p.speed_max);
    let vz = if p.depth_speed_max > 0.0 {
        rng.random_range(-p.depth_speed_max..=p.depth_speed_max)
    } else {
        0.0
    };
    [speed * angle.cos(), speed * angle.sin(), vz]
}

fn random_agent(rng: &mut ChaCha8Rng, p: &ScenarioParams) -> Agent {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    Agent {
        pos: [
            rng.random_range(0.0..f64::from(p.width)),
            rng.random_range(0.0..f64::from(p.height)),
            rng.random_range(p.depth_min..=p.depth_max),
        ],
        vel: random_velocity(rng, p, angle),
    }
}

/// A pair heading for a shared point at a random frame, plus background agents.
fn colliding_agents(rng: &mut ChaCha8Rng, p: &ScenarioParams) -> Vec<Agent> {
    let t_hit = rng.random_range((p.min_toa + 2) as f64..=(p.num_frames - 3) as f64);
    let meet = [
        rng.random_range(0.2..0.8) * f64::from(p.width),
        rng.random_range(0.2..0.8) * f64::from(p.height),
        rng.random_range(p.depth_min..=p.depth_max),
    ];
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let spread = std::f64::consts::FRAC_PI_3;
    let headings = [
        theta,
        theta + std::f64::consts::PI + rng.random_range(-spread..=spread),
    ];
    let jitter = 0.3 * p.collision_threshold * p.diagonal();
    let mut agents: Vec<Agent> = headings
        .iter()
        .map(|&h| {
            let vel = random_velocity(rng, p, h);
            let off = [
                rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
            ];
            Agent {
                pos: [
                    meet[0] + off[0] - vel[0] * t_hit,
                    meet[1] + off[1] - vel[1] * t_hit,
                    meet[2] - vel[2] * t_hit,
                ],
                vel,
            }
        })
        .collect();
    agents.extend((2..p.num_agents).map(|_| random_agent(rng, p)));
    agents
}

fn render(
    agents: &[Agent],
    slots: &[usize],
    p: &ScenarioParams,
    embedding: &Embedding,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureBundle> {
    let (t_len, f) = (p.num_frames, p.feature_dim);
    let mut bundle = FeatureBundle::zeros(t_len, OBJECT_SLOTS, f, p.width, p.height);
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
    let half = p.box_size / 2.0;
    for t in 0..t_len {
        let mut mean = vec![0.0; f];
        for (agent, &slot) in agents.iter().zip(slots) {
            let pos = agent.at(t as f64).map(|v| v as f32 as f64);
            let k = t * OBJECT_SLOTS + slot;
            let (cx, cy) = (pos[0] as f32, pos[1] as f32);
            let h = half as f32;
            bundle.boxes[k * 4..k * 4 + 4].copy_from_slice(&[cx - h, cy - h, cx + h, cy + h]);
            bundle.scores[k] = 1.0;
            bundle.obj_depth[k] = pos[2] as f32;
            let emb = embedding.apply(&embedding_input(p, pos, [agent.vel[0], agent.vel[1]]));
            for (j, v) in emb.iter().enumerate() {
                mean[j] += v / agents.len() as f64;
                bundle.obj_feat[k * f + j] = (v + noise.sample(rng)) as f32;
            }
        }
        for (j, m) in mean.iter().enumerate() {
            bundle.frame_feat[t * f + j] = (m + noise.sample(rng)) as f32;
        }
    }
    Ok(bundle)
}

/// Which label a generator call should try to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Positive,
    Negative,
    /// Accept whatever the oracle returns for an unconstrained draw.
    Any,
}

/// One labelled clip. The returned sample has an empty id and bundle path.
pub fn gen_scenario(params: &ScenarioParams) -> Result<(VideoSample, FeatureBundle)> {
    gen_target(
        params,
        Target::Any,
        &Embedding::new(params.feature_dim, params.embedding_seed),
    )
}

/// Draws candidates until one satisfies `target` and the acceptance rules.
pub fn gen_target(
    params: &ScenarioParams,
    target: Target,
    embedding: &Embedding,
) -> Result<(VideoSample, FeatureBundle)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..params.max_attempts {
        let agents = match target {
            Target::Positive => colliding_agents(&mut rng, params),
            _ => (0..params.num_agents)
                .map(|_| random_agent(&mut rng, params))
                .collect(),
        };
        let depth_ok = agents.iter().all(|a| {
            let last = (params.num_frames - 1) as f64;
            a.at(0.0)[2] > 1.0 && a.at(last)[2] > 1.0
        });
        if !depth_ok {
            continue;
        }
        let slots: Vec<usize> = if params.scatter_slots {
            let mut s =
                rand::seq::index::sample(&mut rng, OBJECT_SLOTS, params.num_agents).into_vec();
            s.sort_unstable();
            s
        } else {
            (0..params.num_agents).collect()
        };
        // assign agents to slots in random order
        let order =
            rand::seq::index::sample(&mut rng, params.num_agents, params.num_agents).into_vec();
        let shuffled: Vec<Agent> = order.iter().map(|&i| agents[i]).collect();
        let bundle = render(&shuffled, &slots, params, embedding, &mut rng)?;
        let traj = Trajectories::from_bundle(&bundle);
        let (label, toa) = oracle_label(&traj, params.collision_threshold, &params.geometry);
        let accept = match (target, label) {
            (Target::Negative | Target::Any, Label::Negative) => {
                target == Target::Any || acceptable_negative(&traj, params)
            }
            (Target::Positive | Target::Any, Label::Positive) => toa >= params.min_toa as i64,
            _ => false,
        };
        if accept {
            let sample = VideoSample {
                id: String::new(),
                label,
                toa,
                fps: params.fps,
                num_frames: params.num_frames,
                bundle_path: String::new(),
                factors: None,
                accident_type: None,
            };
            return Ok((sample, bundle));
        }
    }
    Err(Error::Invalid(format!(
        "no acceptable {target:?} scenario after {} attempts (seed {})",
        params.max_attempts, params.seed
    )))
}

/// Margin and (optionally) receding checks for negative clips.
fn acceptable_negative(traj: &Trajectories, p: &ScenarioParams) -> bool {
    let margin = p.negative_margin * p.collision_threshold;
    if !traj
        .min_distances(&p.geometry)
        .iter()
        .all(|d| d.is_none_or(|d| d >= margin))
    {
        return false;
    }
    !p.receding_negatives || traj.all_pairs_receding(&p.geometry)
}

/// Label counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_pos: usize,
    pub train_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
}

impl SplitCounts {
    /// Stratified 80/20 train/test split.
    pub fn eighty_twenty(n_pos: usize, n_neg: usize) -> Self {
        let test = |n: usize| (n as f64 * 0.2).round() as usize;
        SplitCounts {
            train_pos: n_pos - test(n_pos),
            train_neg: n_neg - test(n_neg),
            test_pos: test(n_pos),
            test_neg: test(n_neg),
        }
    }

    /// Given train and test sizes, keeps the positive share of each near `pos_share`.
    pub fn sized(train: usize, test: usize, pos_share: f64) -> Self {
        let pos = |n: usize| (n as f64 * pos_share).round() as usize;
        SplitCounts {
            train_pos: pos(train),
            train_neg: train - pos(train),
            test_pos: pos(test),
            test_neg: test - pos(test),
        }
    }
}

/// Generates `n_pos` positives and `n_neg` negatives with an 80/20 split.
pub fn gen_dataset(
    n_pos: usize,
    n_neg: usize,
    params: &ScenarioParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    gen_dataset_split(SplitCounts::eighty_twenty(n_pos, n_neg), params, out_dir)
}

/// Writes bundles under `out_dir/bundles` and `out_dir/manifest.json`.
/// Clip `k` is drawn with seed `params.seed + k`.
pub fn gen_dataset_split(
    counts: SplitCounts,
    params: &ScenarioParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    if counts.train_pos + counts.train_neg + counts.test_pos + counts.test_neg == 0 {
        return Err(Error::Invalid(
            "dataset must contain at least one clip".into(),
        ));
    }
    let bundle_dir = out_dir.join("bundles");
    std::fs::create_dir_all(&bundle_dir).map_err(|e| Error::io(&bundle_dir, e))?;
    let embedding = Embedding::new(params.feature_dim, params.embedding_seed);
    let plan = [
        ("train", Target::Positive, counts.train_pos),
        ("train", Target::Negative, counts.train_neg),
        ("test", Target::Positive, counts.test_pos),
        ("test", Target::Negative, counts.test_neg),
    ];
    let mut samples = Vec::new();
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    splits.insert("train".into(), Vec::new());
    splits.insert("test".into(), Vec::new());
    let mut index = 0u64;
    for (split, target, count) in plan {
        for _ in 0..count {
            let scenario = ScenarioParams {
                seed: params.seed.wrapping_add(index),
                ..params.clone()
            };
            let (mut sample, bundle) = gen_target(&scenario, target, &embedding)?;
            sample.id = format!("synth_{index:05}");
            sample.bundle_path = format!("bundles/{}.bin", sample.id);
            write_bundle(&bundle, out_dir.join(&sample.bundle_path))?;
            splits
                .get_mut(split)
                .expect("split")
                .push(sample.id.clone());
            samples.push(sample);
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-seed{}", params.seed),
        samples,
        splits,
    };
    manifest.check()?;
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
