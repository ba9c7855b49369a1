//! Random fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use overthink::detectors::{Detector, GbModel, LogisticModel, MlpModel, Model, Node, Standardizer, Tree};
use overthink::trace::{
    DecodedLayer, EmbeddingTable, Layers, LensParams, ModelHead, RawLayer, SampleTrace, TokenProb,
};

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Non-negative weights summing to one.
pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn random_head(rng: &mut ChaCha8Rng, raw: bool) -> ModelHead {
    let (l, h, d, v) = (
        rng.random_range(1..=4),
        rng.random_range(1..=3),
        rng.random_range(1..=6),
        rng.random_range(2..=12),
    );
    let lens = raw.then(|| LensParams {
        projection: (0..v * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        norm_gain: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
        norm_bias: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
        norm_epsilon: 1e-5,
    });
    ModelHead {
        model_id: format!("model-{}", rng.random_range(0..1000)),
        num_layers: l,
        num_heads: h,
        hidden_dim: d,
        vocab_size: v,
        lens,
    }
}

pub fn random_sample(rng: &mut ChaCha8Rng, head: &ModelHead, id: &str) -> SampleTrace {
    let t = rng.random_range(2..=8);
    let mut positions: Vec<u32> = (0..t as u32).collect();
    positions.shuffle(rng);
    let n_img = rng.random_range(1..t);
    let n_txt = rng.random_range(1..=t - n_img);
    let image_indices = positions[..n_img].to_vec();
    let text_indices = positions[n_img..n_img + n_txt].to_vec();
    let v = head.vocab_size;
    let layers = if head.lens.is_some() {
        Layers::Raw(
            (0..head.num_layers)
                .map(|_| RawLayer {
                    hidden_state: (0..head.hidden_dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    attention_rows: (0..head.num_heads)
                        .map(|_| simplex(rng, t).into_iter().map(|x| x as f32).collect())
                        .collect(),
                })
                .collect(),
        )
    } else {
        Layers::Decoded((0..head.num_layers).map(|_| random_decoded_layer(rng, v)).collect())
    };
    let final_token_id = rng.random_range(0..v as u32);
    SampleTrace {
        sample_id: id.to_owned(),
        prefix_token_ids: (0..t).map(|_| rng.random_range(0..v as u32)).collect(),
        target_position: t,
        image_indices,
        text_indices,
        layers,
        final_token_id,
        final_token_string: format!("tök {final_token_id}"),
    }
}

fn random_decoded_layer(rng: &mut ChaCha8Rng, v: usize) -> DecodedLayer {
    let k = rng.random_range(1..=v.min(5));
    let mut ids: Vec<u32> = (0..v as u32).collect();
    ids.shuffle(rng);
    let mass = rng.random_range(0.5..1.0);
    let mut probs: Vec<f32> = simplex(rng, k).into_iter().map(|p| (p * mass) as f32).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    DecodedLayer {
        topk: ids[..k]
            .iter()
            .zip(probs)
            .map(|(&token_id, probability)| TokenProb { token_id, probability })
            .collect(),
        entropy: rng.random_range(0.0..(v as f64).ln() * 0.99) as f32,
        img_attn: rng.random_range(0.0..1.0),
        txt_attn: rng.random_range(0.0..1.0),
    }
}

pub fn random_trace(rng: &mut ChaCha8Rng) -> (ModelHead, Vec<SampleTrace>) {
    let raw = rng.random_bool(0.5);
    let head = random_head(rng, raw);
    let n = rng.random_range(0..4);
    let samples = (0..n).map(|i| random_sample(rng, &head, &format!("s{i}"))).collect();
    (head, samples)
}

pub fn random_table(rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let dim = rng.random_range(1..=8);
    let mut table = EmbeddingTable::new(dim).unwrap();
    for i in 0..rng.random_range(0..12) {
        let token = if i % 3 == 0 { format!(" ▁word{i}") } else { format!("t{i}") };
        table.insert(token, unit_vector(rng, dim)).unwrap();
    }
    table
}

fn random_tree(rng: &mut ChaCha8Rng, p: usize, depth: usize, nodes: &mut Vec<Node>) -> usize {
    let idx = nodes.len();
    nodes.push(Node::Leaf { value: 0.0 });
    if depth == 0 || rng.random_bool(0.3) {
        nodes[idx] = Node::Leaf {
            value: rng.random_range(-2.0..2.0),
        };
    } else {
        let left = random_tree(rng, p, depth - 1, nodes);
        let right = random_tree(rng, p, depth - 1, nodes);
        nodes[idx] = Node::Split {
            feature: rng.random_range(0..p),
            threshold: rng.random_range(-3.0..3.0),
            left,
            right,
        };
    }
    idx
}

pub fn random_detector(rng: &mut ChaCha8Rng) -> Detector {
    let p = rng.random_range(1..=6);
    let model = match rng.random_range(0..3) {
        0 => Model::Logistic(LogisticModel {
            weights: (0..p).map(|_| rng.random_range(-5.0..5.0)).collect(),
            bias: rng.random_range(-1.0..1.0),
        }),
        1 => Model::Boosted(GbModel {
            init_score: rng.random_range(-1.0..1.0),
            learning_rate: rng.random_range(0.01..0.5),
            trees: (0..rng.random_range(0..5))
                .map(|_| {
                    let mut nodes = Vec::new();
                    random_tree(rng, p, 3, &mut nodes);
                    Tree { nodes }
                })
                .collect(),
        }),
        _ => {
            let k = rng.random_range(1..=6);
            Model::Mlp(MlpModel {
                hidden: k,
                w1: (0..k * p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                b1: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                w2: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                b2: rng.random_range(-1.0..1.0),
            })
        }
    };
    let feature_names = if rng.random_bool(0.5) {
        (0..p).map(|i| format!("f{i}")).collect()
    } else {
        Vec::new()
    };
    Detector {
        feature_names,
        standardizer: Standardizer {
            means: (0..p).map(|_| rng.random_range(-10.0..10.0)).collect(),
            stds: (0..p).map(|_| rng.random_range(0.1..10.0)).collect(),
        },
        threshold: rng.random_range(0.05..0.95),
        model,
    }
}

/// Offset of the only occurrence of `needle` in `haystack`.
pub fn unique_offset(haystack: &[u8], needle: &[u8]) -> usize {
    let hits: Vec<usize> = haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(hits.len(), 1, "sentinel occurs {} times", hits.len());
    hits[0]
}
