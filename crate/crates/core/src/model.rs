//! Parameters and the forward map from features and graphs to user/item representations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Matrix, Tape, Var};
use crate::config::{Backbone, RunConfig};
use crate::data::ibmf::{self, Precision};
use crate::data::{Dataset, InteractionSet};
use crate::error::{Error, Result};
use crate::graph::{self, SemanticItemGraph};
use crate::sparse::SparseMatrix;

const INIT_STD: f64 = 0.01;
const NORM_EPS: f64 = 1e-12;

/// Which optimization stages update a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Updated by the recommendation stage only.
    Stage1,
    /// Updated by both stages.
    Shared,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Stage1 => "stage1",
            Role::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
    pub role: Role,
}

/// All trainable tensors in a fixed order:
/// user latent, item latent, user media, per-modality (weight, bias),
/// fusion logits, then the edge-mask MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
    num_modalities: usize,
}

pub const USER_LATENT: usize = 0;
pub const ITEM_LATENT: usize = 1;
pub const USER_MEDIA: usize = 2;

impl ModelParams {
    pub fn init<R: Rng>(
        num_users: usize,
        num_items: usize,
        modality_dims: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut gauss = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("sized buffer")
        };
        let mut tensors = vec![
            Tensor {
                name: "user_latent".into(),
                value: gauss(num_users, dim),
                role: Role::Stage1,
            },
            Tensor {
                name: "item_latent".into(),
                value: gauss(num_items, dim),
                role: Role::Stage1,
            },
            Tensor {
                name: "user_media".into(),
                value: gauss(num_users, dim),
                role: Role::Shared,
            },
        ];
        for (k, &dk) in modality_dims.iter().enumerate() {
            tensors.push(Tensor {
                name: format!("proj{k}.weight"),
                value: gauss(dk, dim),
                role: Role::Shared,
            });
            tensors.push(Tensor {
                name: format!("proj{k}.bias"),
                value: Matrix::zeros(1, dim),
                role: Role::Shared,
            });
        }
        tensors.push(Tensor {
            name: "fusion_logits".into(),
            value: Matrix::zeros(1, modality_dims.len()),
            role: Role::Stage1,
        });
        let w1 = gauss(4 * dim, dim);
        let w2 = gauss(dim, 1);
        for (name, value) in [
            ("mask.w1", w1),
            ("mask.b1", Matrix::zeros(1, dim)),
            ("mask.w2", w2),
            ("mask.b2", Matrix::zeros(1, 1)),
        ] {
            tensors.push(Tensor {
                name: name.into(),
                value,
                role: Role::Stage1,
            });
        }
        ModelParams {
            tensors,
            num_modalities: modality_dims.len(),
        }
    }

    pub fn for_dataset<R: Rng>(dataset: &Dataset, dim: usize, rng: &mut R) -> Self {
        Self::init(
            dataset.interactions.num_users(),
            dataset.interactions.num_items(),
            &dataset.features.dims(),
            dim,
            rng,
        )
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn dim(&self) -> usize {
        self.tensors[USER_LATENT].value.cols()
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.tensors[index].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Indices of modality `k`'s projection (weight, bias).
    pub fn proj_indices(&self, k: usize) -> (usize, usize) {
        (3 + 2 * k, 4 + 2 * k)
    }

    pub fn fusion_index(&self) -> usize {
        3 + 2 * self.num_modalities
    }

    /// Index of the first edge-mask tensor; the four mask tensors are contiguous.
    pub fn mask_index(&self) -> usize {
        self.fusion_index() + 1
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.tensors.iter().map(|t| t.value.sum_of_squares()).sum()
    }

    /// Writes `manifest.tsv` plus one 64-bit IBMF file per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("name\trows\tcols\trole\n");
        for t in &self.tensors {
            let (r, c) = t.value.shape();
            writeln!(manifest, "{}\t{r}\t{c}\t{}", t.name, t.role.as_str()).expect("string write");
            ibmf::write_matrix(
                &dir.join(format!("{}.ibmf", t.name)),
                &t.value,
                Precision::F64,
            )?;
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut tensors = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parse = |detail: &str| Error::Parse {
                path: path.clone(),
                line: n + 1,
                detail: detail.into(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, rows, cols, role] = fields[..] else {
                return Err(parse("expected name, rows, cols, role"));
            };
            let rows: usize = rows.parse().map_err(|_| parse("bad row count"))?;
            let cols: usize = cols.parse().map_err(|_| parse("bad column count"))?;
            let role = match role {
                "stage1" => Role::Stage1,
                "shared" => Role::Shared,
                _ => return Err(parse("unknown role")),
            };
            let value = ibmf::load_feature_matrix(&dir.join(format!("{name}.ibmf")))?;
            if value.shape() != (rows, cols) {
                return Err(Error::Consistency(format!(
                    "checkpoint tensor `{name}` is {:?}, manifest says {rows}x{cols}",
                    value.shape()
                )));
            }
            tensors.push(Tensor {
                name: name.to_string(),
                value,
                role,
            });
        }
        let num_modalities = tensors
            .iter()
            .filter(|t| t.name.starts_with("proj") && t.name.ends_with(".weight"))
            .count();
        let params = ModelParams {
            tensors,
            num_modalities,
        };
        let expected = params.mask_index() + 4;
        if params.len() != expected || params.index_of("mask.b2") != Some(expected - 1) {
            return Err(Error::Consistency(format!(
                "checkpoint in `{}` does not have the expected tensor layout",
                dir.display()
            )));
        }
        Ok(params)
    }
}

/// Tape handles for every tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    num_modalities: usize,
}

impl ParamVars {
    /// Registers tensors selected by `trainable` as parameters and the rest as constants.
    pub fn bind(
        tape: &mut Tape,
        params: &ModelParams,
        trainable: impl Fn(&Tensor) -> bool,
    ) -> Result<Self> {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable(t) {
                    tape.parameter(t.value.clone())
                } else {
                    tape.constant(t.value.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(ParamVars {
            vars,
            num_modalities: params.num_modalities,
        })
    }

    /// Wraps handles already on a tape, in [`ModelParams`] tensor order.
    pub fn from_vars(vars: Vec<Var>, num_modalities: usize) -> Result<Self> {
        if vars.len() != 3 + 2 * num_modalities + 1 + 4 {
            return Err(Error::Contract(format!(
                "{} handles for a model with {num_modalities} modalities",
                vars.len()
            )));
        }
        Ok(ParamVars {
            vars,
            num_modalities,
        })
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn user_latent(&self) -> Var {
        self.vars[USER_LATENT]
    }

    pub fn item_latent(&self) -> Var {
        self.vars[ITEM_LATENT]
    }

    pub fn user_media(&self) -> Var {
        self.vars[USER_MEDIA]
    }

    pub fn proj(&self, k: usize) -> (Var, Var) {
        (self.vars[3 + 2 * k], self.vars[4 + 2 * k])
    }

    pub fn fusion_logits(&self) -> Var {
        self.vars[3 + 2 * self.num_modalities]
    }

    /// (w1, b1, w2, b2)
    pub fn mask(&self) -> [Var; 4] {
        let s = 4 + 2 * self.num_modalities;
        [
            self.vars[s],
            self.vars[s + 1],
            self.vars[s + 2],
            self.vars[s + 3],
        ]
    }
}

/// Fixed inputs of the forward map: features, graphs and structural settings.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub backbone: Backbone,
    pub layers: usize,
    pub mask_temperature: f64,
    /// Whether the item graph passes through the learned edge mask.
    pub use_mask: bool,
    pub features: Vec<Arc<Matrix>>,
    pub bipartite: Option<Arc<SparseMatrix>>,
    pub item_graph: Option<SemanticItemGraph>,
}

impl ModelContext {
    /// Builds the graphs the backbone needs from raw features and training interactions.
    pub fn build(dataset: &Dataset, config: &RunConfig) -> Result<Self> {
        let bipartite = config
            .backbone
            .uses_bipartite_graph()
            .then(|| Arc::new(bipartite_operator(&dataset.interactions)));
        let item_graph = if config.backbone.uses_item_graph() {
            Some(SemanticItemGraph::from_features(
                dataset.features.modalities.iter().map(|(_, m)| m),
                config.knn_topk,
            )?)
        } else {
            None
        };
        Ok(ModelContext {
            backbone: config.backbone,
            layers: config.gcn_layers,
            mask_temperature: config.mask_temperature,
            use_mask: config.gib_active(),
            features: dataset
                .features
                .modalities
                .iter()
                .map(|(_, m)| Arc::new(m.clone()))
                .collect(),
            bipartite,
            item_graph,
        })
    }

    pub fn num_items(&self) -> usize {
        self.features[0].rows()
    }

    fn needs_projections(&self) -> bool {
        self.backbone.uses_media_embeddings() || self.use_mask
    }
}

/// Normalized user-item adjacency over `M + N` nodes.
pub fn bipartite_operator(set: &InteractionSet) -> SparseMatrix {
    graph::sym_normalize(&graph::build_bipartite_adjacency(set))
}

/// How the learned edge mask is applied in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum MaskMode<'a> {
    /// Relaxed Bernoulli sample; holds logistic noise `ln u − ln(1−u)`, one value per edge.
    Sample(&'a [f64]),
    /// Expected multipliers `w = σ(o)`.
    Expected,
}

/// Draws the logistic noise consumed by [`MaskMode::Sample`].
pub fn logistic_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0 - f64::EPSILON);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Per-modality projections, N×d each.
    pub z_modal: Vec<Var>,
    /// Mean projection, N×d.
    pub z_mean: Option<Var>,
    /// User representation.
    pub x: Var,
    /// Item representation from the user-item branch.
    pub y: Var,
    /// Item representation after adding the item-graph branch.
    pub y_fused: Var,
    /// Item-graph branch output on the (possibly masked) graph.
    pub y_prime: Option<Var>,
    /// Item-graph branch output on the unmasked graph, detached. Present when sampling a mask.
    pub y_prime_base: Option<Var>,
    /// Per-edge mask logits `o`, with `w = σ(o)`.
    pub mask_logits: Option<Var>,
}

/// `Z^k = M^k W_k + b_k` for every modality.
pub fn project_modalities(tape: &mut Tape, ctx: &ModelContext, p: &ParamVars) -> Result<Vec<Var>> {
    ctx.features
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (w, b) = p.proj(k);
            if tape.shape(w).0 != m.cols() {
                return Err(Error::Config(format!(
                    "modality {k} has {} feature columns but its projection expects {}",
                    m.cols(),
                    tape.shape(w).0
                )));
            }
            let z = tape.const_mat_mul(m, w)?;
            tape.add_row(z, b)
        })
        .collect()
}

pub fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &v in &parts[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

/// Parameter-free propagation over the normalized bipartite operator; returns the layer mean.
pub fn propagate_user_item(
    tape: &mut Tape,
    norm_adj: &Arc<SparseMatrix>,
    x0: Var,
    y0: Var,
    layers: usize,
) -> Result<(Var, Var)> {
    let m = tape.shape(x0).0;
    let n = tape.shape(y0).0;
    let e0 = tape.concat_rows(&[x0, y0])?;
    let mut e = e0;
    let mut acc = e0;
    for _ in 0..layers {
        e = tape.sparse_mat_mul(norm_adj, e)?;
        acc = tape.add(acc, e)?;
    }
    let mean = tape.scale(acc, 1.0 / (layers + 1) as f64)?;
    Ok((tape.slice_rows(mean, 0, m)?, tape.slice_rows(mean, m, n)?))
}

/// `L` rounds of item-item propagation with per-edge values; returns the last layer.
pub fn propagate_item_item(
    tape: &mut Tape,
    pattern: &Arc<SparseMatrix>,
    edge_values: Var,
    y0: Var,
    layers: usize,
) -> Result<Var> {
    let mut y = y0;
    for _ in 0..layers {
        y = tape.weighted_sparse_mat_mul(pattern, edge_values, y)?;
    }
    Ok(y)
}

/// `Y + Y'` with each row of `Y'` scaled to unit length.
pub fn fuse_item_representations(tape: &mut Tape, y: Var, y_prime: Var) -> Result<Var> {
    let unit = tape.l2_row_normalize(y_prime, NORM_EPS)?;
    tape.add(y, unit)
}

/// Edge-mask logits from `[z_i ‖ q_i ‖ z_j ‖ q_j]` through a two-layer MLP.
///
/// The first layer is split into its `i` and `j` halves and applied per item
/// before gathering per edge, which gives the same result as applying it to
/// the concatenated edge input.
pub fn edge_mask_logits(
    tape: &mut Tape,
    graph: &SemanticItemGraph,
    z_mean: Var,
    item_latent: Var,
    mlp: [Var; 4],
) -> Result<Var> {
    let [w1, b1, w2, b2] = mlp;
    let f = tape.concat_cols(&[z_mean, item_latent])?;
    let width = tape.shape(f).1;
    if tape.shape(w1).0 != 2 * width {
        return Err(Error::dim(
            "edge_mask_logits",
            format!(
                "first layer {:?} for node input width {width}",
                tape.shape(w1)
            ),
        ));
    }
    let w_src = tape.slice_rows(w1, 0, width)?;
    let w_dst = tape.slice_rows(w1, width, width)?;
    let h_src = tape.mat_mul(f, w_src)?;
    let h_dst = tape.mat_mul(f, w_dst)?;
    let h_src = tape.row_gather(h_src, &graph.entry_rows)?;
    let h_dst = tape.row_gather(h_dst, &graph.entry_cols)?;
    let h = tape.add(h_src, h_dst)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.tanh(h)?;
    let o = tape.mat_mul(h, w2)?;
    tape.add_row(o, b2)
}

/// Per-edge multipliers `ρ̃`: `σ((o + noise)/t)` when sampling, `σ(o)` otherwise.
pub fn mask_multipliers(
    tape: &mut Tape,
    logits: Var,
    mode: MaskMode<'_>,
    temperature: f64,
) -> Result<Var> {
    match mode {
        MaskMode::Expected => tape.sigmoid(logits),
        MaskMode::Sample(noise) => {
            if noise.len() != tape.shape(logits).0 {
                return Err(Error::dim(
                    "mask_multipliers",
                    format!(
                        "{} noise values for {} edges",
                        noise.len(),
                        tape.shape(logits).0
                    ),
                ));
            }
            if temperature <= 0.0 {
                return Err(Error::Contract("mask temperature must be positive".into()));
            }
            let noise = tape.constant(Matrix::column(noise))?;
            let shifted = tape.add(logits, noise)?;
            let scaled = tape.scale(shifted, 1.0 / temperature)?;
            tape.sigmoid(scaled)
        }
    }
}

/// The full forward map for the configured backbone.
pub fn forward(
    tape: &mut Tape,
    ctx: &ModelContext,
    p: &ParamVars,
    mode: MaskMode<'_>,
) -> Result<ForwardOutputs> {
    let (z_modal, z_mean) = if ctx.needs_projections() {
        let z = project_modalities(tape, ctx, p)?;
        let mean = mean_of(tape, &z)?;
        (z, Some(mean))
    } else {
        (Vec::new(), None)
    };
    let (x0, y0) = match (ctx.backbone.uses_media_embeddings(), z_mean) {
        (true, Some(zm)) => (
            tape.concat_cols(&[p.user_latent(), p.user_media()])?,
            tape.concat_cols(&[p.item_latent(), zm])?,
        ),
        _ => (p.user_latent(), p.item_latent()),
    };
    let (x, y) = match &ctx.bipartite {
        Some(adj) => propagate_user_item(tape, adj, x0, y0, ctx.layers)?,
        None => (x0, y0),
    };
    let mut out = ForwardOutputs {
        z_modal,
        z_mean,
        x,
        y,
        y_fused: y,
        y_prime: None,
        y_prime_base: None,
        mask_logits: None,
    };
    let Some(graph) = &ctx.item_graph else {
        return Ok(out);
    };
    let base_values = graph::fuse_and_normalize(tape, graph, p.fusion_logits())?;
    let edge_values = if ctx.use_mask {
        let zm = z_mean.expect("projections are computed when the mask is used");
        let o = edge_mask_logits(tape, graph, zm, p.item_latent(), p.mask())?;
        out.mask_logits = Some(o);
        if matches!(mode, MaskMode::Sample(_)) {
            let base = propagate_item_item(tape, &graph.pattern, base_values, y0, ctx.layers)?;
            out.y_prime_base = Some(tape.detach(base)?);
        }
        let rho = mask_multipliers(tape, o, mode, ctx.mask_temperature)?;
        tape.mul(base_values, rho)?
    } else {
        base_values
    };
    let y_prime = propagate_item_item(tape, &graph.pattern, edge_values, y0, ctx.layers)?;
    out.y_prime = Some(y_prime);
    out.y_fused = fuse_item_representations(tape, y, y_prime)?;
    Ok(out)
}

/// `<x_a, y_i>` for each (user, item) pair.
pub fn predict_scores(
    tape: &mut Tape,
    x: Var,
    y: Var,
    users: &[usize],
    items: &[usize],
) -> Result<Var> {
    if users.len() != items.len() {
        return Err(Error::dim(
            "predict_scores",
            format!("{} users for {} items", users.len(), items.len()),
        ));
    }
    let xu = tape.row_gather(x, users)?;
    let yi = tape.row_gather(y, items)?;
    tape.row_dot(xu, yi)
}

/// Final user and item representations with the expected edge mask; no gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub users: Matrix,
    pub items: Matrix,
}

impl Representations {
    pub fn compute(ctx: &ModelContext, params: &ModelParams) -> Result<Self> {
        let mut tape = Tape::new();
        let p = ParamVars::bind(&mut tape, params, |_| false)?;
        let out = forward(&mut tape, ctx, &p, MaskMode::Expected)?;
        Ok(Representations {
            users: tape.value(out.x).clone(),
            items: tape.value(out.y_fused).clone(),
        })
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.users
            .row(user)
            .iter()
            .zip(self.items.row(item))
            .map(|(a, b)| a * b)
            .sum()
    }
}
