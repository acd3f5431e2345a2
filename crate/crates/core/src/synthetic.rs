//! Synthetic frame stores and canned agent replies for tests, examples and
//! offline demos.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::frame_store::{Frame, FrameStore};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn basis(dim: usize, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

fn frame(index: usize, embedding: &[f64], caption: String) -> Frame {
    Frame {
        index,
        timestamp_s: index as f64,
        caption,
        embedding: embedding.iter().map(|&x| x as f32).collect(),
        image_ref: Some(format!("frames/{index:04}.jpg")),
    }
}

pub struct TwoClusters {
    pub store: FrameStore,
    pub anchor_a: Vec<f64>,
    pub anchor_b: Vec<f64>,
}

/// Two clusters of `per_group` frames each. Frame `i` of cluster `c` points
/// along `0.6 * axis_c + 0.8 * u_i` with a private axis `u_i`, so each
/// cluster leans toward its own anchor.
pub fn two_clusters(per_group: usize) -> TwoClusters {
    let n = 2 * per_group;
    let dim = 2 + n;
    let frames = (0..n)
        .map(|i| {
            let (axis, label) = if i < per_group { (0, "red") } else { (1, "blue") };
            let mut e = vec![0.0; dim];
            e[axis] = 0.6;
            e[2 + i] = 0.8;
            frame(i, &e, format!("{label} object, shot {i}"))
        })
        .collect();
    TwoClusters {
        store: FrameStore::new("two-clusters", dim, 1.0, frames).expect("valid synthetic store"),
        anchor_a: basis(dim, 0),
        anchor_b: basis(dim, 1),
    }
}

pub struct Planted {
    pub store: FrameStore,
    pub anchor: Vec<f64>,
}

/// `n` frames of Gaussian background in `dim` dimensions, except the
/// `planted` indices, which point along `0.6 * anchor + 0.8 * u` for a fresh
/// random `u` orthogonal to the anchor. The anchor is the first axis.
pub fn planted(n: usize, dim: usize, planted: &[usize], seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        unit((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    };
    let frames = (0..n)
        .map(|i| {
            let e = if planted.contains(&i) {
                let mut u = gaussian(&mut rng);
                u[0] = 0.0;
                let u = unit(u);
                let mut e: Vec<f64> = u.iter().map(|x| 0.8 * x).collect();
                e[0] = 0.6;
                e
            } else {
                gaussian(&mut rng)
            };
            frame(i, &e, format!("frame {i}"))
        })
        .collect();
    Planted {
        store: FrameStore::new("planted", dim, 1.0, frames).expect("valid synthetic store"),
        anchor: basis(dim, 0),
    }
}

/// JSON replies in the shapes the agents expect.
pub mod replies {
    use super::json;

    pub fn storyline(narrative: &str) -> String {
        json!({ "narrative": narrative }).to_string()
    }

    pub fn hypothesis(answer: &str, evidence: &str) -> String {
        json!({ "answer": answer, "evidence": evidence }).to_string()
    }

    pub fn decision(option: &str, evidence: &str, weights: &[(usize, f64)]) -> String {
        let w: serde_json::Map<String, serde_json::Value> =
            weights.iter().map(|(i, w)| (i.to_string(), json!(w))).collect();
        json!({ "option": option, "evidence": evidence, "frame_weights": w }).to_string()
    }

    pub fn meta(option: &str, justification: &str) -> String {
        json!({ "final_option": option, "justification": justification }).to_string()
    }

    pub fn suggestion(frames: &[i64], rationale: &str) -> String {
        json!({ "frames": frames, "rationale": rationale }).to_string()
    }
}
