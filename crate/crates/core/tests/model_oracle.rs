//! The full forward pass recomputed with plain loops over named parameter
//! values, independent of the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stum::backbone::{BackboneKind, BackboneSpec};
use stum::data::{Edge, TrafficGraph};
use stum::model::{Stum, StumConfig};
use stum::Tensor;

const B: usize = 2;

fn toy(kind: BackboneKind) -> StumConfig {
    StumConfig {
        input_len: 3,
        horizon: 3,
        num_nodes: 4,
        in_channels: 2,
        embed_dim: 8,
        num_mlrf: 2,
        astucs_per_block: 4,
        backbone: BackboneSpec {
            kind,
            hidden: vec![5, 6],
        },
        seed: 17,
        ..StumConfig::default()
    }
}

/// Moves every trainable parameter to a random point so that no factor or
/// bias is zero.
fn randomized(cfg: StumConfig, seed: u64) -> Stum {
    let mut model = Stum::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    model
}

struct Params<'a>(&'a Stum);

impl Params<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        let store = self.0.params();
        let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        store.value(id).data().to_vec()
    }

    /// `W + (r / (1 + 1e-8))·A·Bᵀ` as a row-major `rows × cols` matrix.
    fn low_rank(&self, prefix: &str, rows: usize, cols: usize) -> Vec<f64> {
        let w = self.get(&format!("{prefix}.weight"));
        let a = self.get(&format!("{prefix}.lora_a"));
        let b = self.get(&format!("{prefix}.lora_b"));
        let r = a.len() / rows;
        assert_eq!(b.len(), cols * r);
        let scale = r as f64 / (1.0 + 1e-8);
        let mut m = w;
        for i in 0..rows {
            for j in 0..cols {
                let mut s = 0.0;
                for k in 0..r {
                    s += a[i * r + k] * b[j * r + k];
                }
                m[i * cols + j] += scale * s;
            }
        }
        m
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Index into a `[B, s, N, C]` buffer.
fn at(dims: [usize; 4], b: usize, t: usize, n: usize, c: usize) -> usize {
    ((b * dims[1] + t) * dims[2] + n) * dims[3] + c
}

fn rms_rows(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let d = w.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let div = (ms + eps).sqrt();
        for k in 0..d {
            o[k] = row[k] / div * w[k];
        }
    }
    out
}

/// Per-node dense stack: input `v`, layers `name.fc{i}`, ReLU between.
fn mlp(p: &Params, v: &[f64], layers: usize) -> Vec<f64> {
    let mut h = v.to_vec();
    for i in 0..layers {
        let w = p.get(&format!("backbone.fc{i}.weight"));
        let bias = p.get(&format!("backbone.fc{i}.bias"));
        let out_dim = bias.len();
        let in_dim = h.len();
        assert_eq!(w.len(), in_dim * out_dim);
        let mut next = bias.clone();
        for j in 0..out_dim {
            for k in 0..in_dim {
                next[j] += h[k] * w[k * out_dim + j];
            }
            if i + 1 < layers {
                next[j] = next[j].max(0.0);
            }
        }
        h = next;
    }
    h
}

fn oracle(model: &Stum, x: &[f64], adjacency: Option<&[f64]>) -> Vec<f64> {
    let cfg = model.config();
    let (s, n, c, d, h) = (
        cfg.input_len,
        cfg.num_nodes,
        cfg.in_channels,
        cfg.embed_dim,
        cfg.horizon,
    );
    let p = Params(model);
    let xd = [B, s, n, c];
    let hd = [B, s, n, d];
    let zd = [B, h, n, c];

    // Backbone, with optional neighbourhood averaging first.
    let mut xb = x.to_vec();
    if let Some(a) = adjacency {
        for b in 0..B {
            for t in 0..s {
                for i in 0..n {
                    for ch in 0..c {
                        xb[at(xd, b, t, i, ch)] = (0..n).map(|k| a[i * n + k] * x[at(xd, b, t, k, ch)]).sum();
                    }
                }
            }
        }
    }
    let layers = cfg.backbone.hidden.len() + 1;
    let mut z_b = vec![0.0; B * h * n * c];
    for b in 0..B {
        for i in 0..n {
            let v: Vec<f64> = (0..s)
                .flat_map(|t| (0..c).map(move |ch| (t, ch)))
                .map(|(t, ch)| xb[at(xd, b, t, i, ch)])
                .collect();
            let out = mlp(&p, &v, layers);
            for t in 0..h {
                for ch in 0..c {
                    z_b[at(zd, b, t, i, ch)] = out[t * c + ch];
                }
            }
        }
    }

    // Channel embedding.
    let m_e = p.low_rank("extractor", c, d);
    let b_e = p.get("extractor.bias");
    let mut hid = vec![0.0; B * s * n * d];
    for b in 0..B {
        for t in 0..s {
            for i in 0..n {
                for k in 0..d {
                    let mut v = b_e[k];
                    for ch in 0..c {
                        v += x[at(xd, b, t, i, ch)] * m_e[ch * d + k];
                    }
                    hid[at(hd, b, t, i, k)] = v;
                }
            }
        }
    }

    for l in 0..cfg.num_mlrf {
        let x_hat = rms_rows(&hid, &p.get(&format!("mlrf.{l}.norm")), cfg.norm_eps);
        let mut g_s = vec![0.0; hid.len()];
        let mut g_t = vec![0.0; hid.len()];
        for pair in 0..cfg.astucs_per_block / 2 {
            // Time cell: mixes the window positions.
            let name = format!("mlrf.{l}.time{pair}");
            let m = p.low_rank(&format!("{name}.map"), s, s);
            let bias = p.get(&format!("{name}.map.bias"));
            let g = sigmoid(p.get(&format!("{name}.gate"))[0]);
            for b in 0..B {
                for j in 0..s {
                    for i in 0..n {
                        for k in 0..d {
                            let mut v = bias[j];
                            for t in 0..s {
                                v += (x_hat[at(hd, b, t, i, k)] + g_s[at(hd, b, t, i, k)]) * m[t * s + j];
                            }
                            let idx = at(hd, b, j, i, k);
                            g_t[idx] = (1.0 - g) * g_s[idx] + g * v.max(0.0);
                        }
                    }
                }
            }
            // Space cell: mixes the nodes, fed by the fresh temporal carrier.
            let name = format!("mlrf.{l}.space{pair}");
            let m = p.low_rank(&format!("{name}.map"), n, n);
            let bias = p.get(&format!("{name}.map.bias"));
            let g = sigmoid(p.get(&format!("{name}.gate"))[0]);
            for b in 0..B {
                for t in 0..s {
                    for j in 0..n {
                        for k in 0..d {
                            let mut v = bias[j];
                            for i in 0..n {
                                v += (x_hat[at(hd, b, t, i, k)] + g_t[at(hd, b, t, i, k)]) * m[i * n + j];
                            }
                            let idx = at(hd, b, t, j, k);
                            g_s[idx] = (1.0 - g) * g_t[idx] + g * v.max(0.0);
                        }
                    }
                }
            }
        }
        let retain = p.get(&format!("mlrf.{l}.memory.retain"));
        let mbias = p.get(&format!("mlrf.{l}.memory.bias"));
        let merged: Vec<f64> = (0..hid.len())
            .map(|idx| {
                let k = idx % d;
                sigmoid(retain[k]) * (g_t[idx] + g_s[idx] + mbias[k])
            })
            .collect();
        let delta = rms_rows(&merged, &p.get(&format!("mlrf.{l}.out_norm")), cfg.norm_eps);
        for (hv, dv) in hid.iter_mut().zip(&delta) {
            *hv += dv;
        }
    }

    // Head: ReLU, flatten s·d per node, one dense map to h·C.
    let w = p.get("head.weight");
    let bias = p.get("head.bias");
    let alpha = sigmoid(p.get("fusion.alpha")[0]);
    let mut z = vec![0.0; z_b.len()];
    for b in 0..B {
        for i in 0..n {
            for o in 0..h * c {
                let mut v = bias[o];
                for t in 0..s {
                    for k in 0..d {
                        v += hid[at(hd, b, t, i, k)].max(0.0) * w[(t * d + k) * h * c + o];
                    }
                }
                let idx = at(zd, b, o / c, i, o % c);
                z[idx] = (1.0 - alpha) * z_b[idx] + alpha * v;
            }
        }
    }
    z
}

fn input(cfg: &StumConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [B, cfg.input_len, cfg.num_nodes, cfg.in_channels];
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn mlp_model_matches_loop_oracle() {
    let model = randomized(toy(BackboneKind::Mlp), 3);
    let x = input(model.config(), 4);
    let got = model.predict(&x, None).unwrap();
    let want = oracle(&model, x.data(), None);
    assert_eq!(got.shape(), &[B, 3, 4, 2]);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
    }
}

#[test]
fn graphconv_model_matches_loop_oracle() {
    let model = randomized(toy(BackboneKind::GraphConv), 5);
    let edges = vec![
        Edge {
            from: 0,
            to: 1,
            weight: 2.0,
        },
        Edge {
            from: 1,
            to: 2,
            weight: 0.5,
        },
        Edge {
            from: 2,
            to: 0,
            weight: 1.0,
        },
        Edge {
            from: 3,
            to: 2,
            weight: 1.5,
        },
    ];
    let graph = TrafficGraph::new(4, edges.clone()).unwrap();
    // Row-normalized (A + I), built directly from the edge list.
    let mut a = vec![0.0; 16];
    for i in 0..4 {
        a[i * 4 + i] = 1.0;
    }
    for e in &edges {
        a[e.from * 4 + e.to] = e.weight;
    }
    for i in 0..4 {
        let deg: f64 = a[i * 4..i * 4 + 4].iter().sum();
        a[i * 4..i * 4 + 4].iter_mut().for_each(|v| *v /= deg);
    }
    let x = input(model.config(), 6);
    let got = model.predict(&x, Some(&graph)).unwrap();
    let want = oracle(&model, x.data(), Some(&a));
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
    }
}
