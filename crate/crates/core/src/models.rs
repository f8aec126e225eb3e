//! Embedding backbones (BPRMF, LightGCN) with analytic BPR gradients.
//!
//! Both backbones keep one embedding row per user and per item. BPRMF scores
//! by a plain dot product; LightGCN propagates the stacked embedding table
//! through the normalized bipartite adjacency and averages layers 0..L before
//! scoring. Gradients are computed analytically, so training never needs an
//! autodiff runtime.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::InteractionSet;
use crate::graph::{CsrMatrix, GraphError};

/// Score differences are clamped here before the logistic function.
pub const SCORE_CLAMP: f64 = 40.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FRQD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("user {0} has no non-interacted item to sample")]
    NoNegativeAvailable(u32),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("LightGCN model needs a propagation graph")]
    MissingPropagation,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Backbone selector. LightGCN carries its propagation operator, the
/// symmetric-normalized bipartite adjacency over `n_users + n_items` nodes.
#[derive(Debug, Clone)]
pub enum Backbone {
    Bprmf,
    LightGcn { layers: usize, propagation: CsrMatrix },
}

impl Backbone {
    pub fn tag(&self) -> u32 {
        match self {
            Backbone::Bprmf => 0,
            Backbone::LightGcn { .. } => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    backbone: Backbone,
}

/// (user, positive item, sampled negative item)
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainTriple {
    pub user: u32,
    pub pos_item: u32,
    pub neg_item: u32,
}

/// Final per-entity embeddings after any propagation; scoring is a dot
/// product between rows.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

impl Scorer {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.user.row(user).dot(&self.item.row(item))
    }

    /// Scores of every item for one user.
    pub fn user_scores(&self, user: usize) -> Array1<f64> {
        self.item.dot(&self.user.row(user))
    }
}

impl EmbeddingModel {
    /// Embeddings drawn i.i.d. normal with std 0.01, rows in table order, so
    /// initialization is reproducible from the generator state.
    pub fn init_with_rng(
        n_users: usize,
        n_items: usize,
        dim: usize,
        backbone: Backbone,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dim >= 1, "embedding dimension must be >= 1");
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut draw = |rows: usize| {
            let mut m = Array2::zeros((rows, dim));
            for v in m.iter_mut() {
                *v = normal.sample(rng);
            }
            m
        };
        EmbeddingModel {
            user_emb: draw(n_users),
            item_emb: draw(n_items),
            backbone,
        }
    }

    pub fn init(n_users: usize, n_items: usize, dim: usize, backbone: Backbone, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(n_users, n_items, dim, backbone, &mut rng)
    }

    /// Rebinds the tables to a new backbone (used when loading checkpoints).
    pub fn with_backbone(user_emb: Array2<f64>, item_emb: Array2<f64>, backbone: Backbone) -> Self {
        EmbeddingModel {
            user_emb,
            item_emb,
            backbone,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.ncols()
    }

    /// Mean of propagation layers 0..L (the identity for BPRMF).
    pub fn scorer(&self) -> Scorer {
        match &self.backbone {
            Backbone::Bprmf => Scorer {
                user: self.user_emb.clone(),
                item: self.item_emb.clone(),
            },
            Backbone::LightGcn {
                layers,
                propagation,
            } => {
                let stacked = self.stack();
                let mixed = propagate_mean(propagation, &stacked, *layers);
                let (user, item) = self.split(&mixed);
                Scorer { user, item }
            }
        }
    }

    fn stack(&self) -> Array2<f64> {
        let n = self.n_users() + self.n_items();
        let d = self.dim();
        let mut stacked = Array2::zeros((n, d));
        stacked
            .slice_mut(ndarray::s![..self.n_users(), ..])
            .assign(&self.user_emb);
        stacked
            .slice_mut(ndarray::s![self.n_users().., ..])
            .assign(&self.item_emb);
        stacked
    }

    fn split(&self, stacked: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        (
            stacked.slice(ndarray::s![..self.n_users(), ..]).to_owned(),
            stacked.slice(ndarray::s![self.n_users().., ..]).to_owned(),
        )
    }

    fn check_triple(&self, t: &TrainTriple) -> Result<(), ModelError> {
        let ok = (t.user as usize) < self.n_users()
            && (t.pos_item as usize) < self.n_items()
            && (t.neg_item as usize) < self.n_items();
        if ok {
            Ok(())
        } else {
            Err(ModelError::IndexOutOfRange(format!("{t:?}")))
        }
    }
}

/// mean(x, A x, A^2 x, ..., A^L x)
fn propagate_mean(adjacency: &CsrMatrix, x: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut acc = x.clone();
    let mut current = x.clone();
    for _ in 0..layers {
        current = adjacency.mul_dense(&current);
        acc += &current;
    }
    acc / (layers as f64 + 1.0)
}

/// Propagation operator for LightGCN over the training interactions.
pub fn bipartite_propagation(train: &InteractionSet) -> Result<CsrMatrix, ModelError> {
    let graph = crate::graph::build_bipartite_graph(train)?;
    Ok(crate::graph::normalized_adjacency(&graph)?)
}

/// Single-pair score. Evaluation code should use [`EmbeddingModel::scorer`]
/// and reuse it; this recomputes any propagation each call.
pub fn score(model: &EmbeddingModel, user: usize, item: usize) -> Result<f64, ModelError> {
    if user >= model.n_users() || item >= model.n_items() {
        return Err(ModelError::IndexOutOfRange(format!(
            "user {user} / item {item}"
        )));
    }
    Ok(model.scorer().score(user, item))
}

/// -ln sigmoid(clamped score difference), computed without overflow.
fn bpr_loss_from_diff(diff: f64) -> f64 {
    let x = diff.clamp(-SCORE_CLAMP, SCORE_CLAMP);
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// d/dx of the BPR loss at the clamped difference: sigmoid(x) - 1.
fn bpr_grad_factor(diff: f64) -> f64 {
    let x = diff.clamp(-SCORE_CLAMP, SCORE_CLAMP);
    -1.0 / (1.0 + x.exp())
}

pub fn bpr_loss(model: &EmbeddingModel, triple: &TrainTriple) -> Result<f64, ModelError> {
    model.check_triple(triple)?;
    let scorer = model.scorer();
    let diff = scorer.score(triple.user as usize, triple.pos_item as usize)
        - scorer.score(triple.user as usize, triple.neg_item as usize);
    Ok(bpr_loss_from_diff(diff))
}

/// Dense gradient tables, shaped like the embeddings.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

impl BatchGrads {
    pub fn zeros(model: &EmbeddingModel) -> Self {
        BatchGrads {
            user: Array2::zeros(model.user_emb.raw_dim()),
            item: Array2::zeros(model.item_emb.raw_dim()),
        }
    }
}

/// Mean BPR loss over a batch and its analytic gradient w.r.t. both
/// embedding tables. Accumulation runs in batch order.
pub fn bpr_batch_gradients(
    model: &EmbeddingModel,
    batch: &[TrainTriple],
) -> Result<(f64, BatchGrads), ModelError> {
    for t in batch {
        model.check_triple(t)?;
    }
    let mut grads = BatchGrads::zeros(model);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    match &model.backbone {
        Backbone::Bprmf => {
            for t in batch {
                let (u, p, n) = (t.user as usize, t.pos_item as usize, t.neg_item as usize);
                let e_u = model.user_emb.row(u).to_owned();
                let e_p = model.item_emb.row(p).to_owned();
                let e_n = model.item_emb.row(n).to_owned();
                let diff = e_u.dot(&e_p) - e_u.dot(&e_n);
                loss += bpr_loss_from_diff(diff);
                let g = bpr_grad_factor(diff) * inv;
                grads.user.row_mut(u).scaled_add(g, &(&e_p - &e_n));
                grads.item.row_mut(p).scaled_add(g, &e_u);
                grads.item.row_mut(n).scaled_add(-g, &e_u);
            }
        }
        Backbone::LightGcn {
            layers,
            propagation,
        } => {
            let scorer = model.scorer();
            let n_users = model.n_users();
            let mut g_mixed = Array2::zeros((n_users + model.n_items(), model.dim()));
            for t in batch {
                let (u, p, n) = (t.user as usize, t.pos_item as usize, t.neg_item as usize);
                let m_u = scorer.user.row(u).to_owned();
                let m_p = scorer.item.row(p).to_owned();
                let m_n = scorer.item.row(n).to_owned();
                let diff = m_u.dot(&m_p) - m_u.dot(&m_n);
                loss += bpr_loss_from_diff(diff);
                let g = bpr_grad_factor(diff) * inv;
                g_mixed.row_mut(u).scaled_add(g, &(&m_p - &m_n));
                g_mixed.row_mut(n_users + p).scaled_add(g, &m_u);
                g_mixed.row_mut(n_users + n).scaled_add(-g, &m_u);
            }
            // the propagation operator is symmetric, so backprop reuses it
            let back = propagate_mean(propagation, &g_mixed, *layers);
            grads.user.assign(&back.slice(ndarray::s![..n_users, ..]));
            grads.item.assign(&back.slice(ndarray::s![n_users.., ..]));
        }
    }
    Ok((loss * inv, grads))
}

/// One plain first-order step: every table is shrunk by the L2 factor
/// `1 - lr * weight_decay`, then the mean batch gradient is applied.
/// Returns the batch loss at the pre-update parameters.
pub fn train_step(
    model: &mut EmbeddingModel,
    batch: &[TrainTriple],
    lr: f64,
    weight_decay: f64,
) -> Result<f64, ModelError> {
    assert!(lr >= 0.0, "learning rate must be nonnegative");
    let (loss, grads) = bpr_batch_gradients(model, batch)?;
    let shrink = 1.0 - lr * weight_decay;
    if shrink != 1.0 {
        model.user_emb *= shrink;
        model.item_emb *= shrink;
    }
    if lr != 0.0 && !batch.is_empty() {
        model.user_emb.scaled_add(-lr, &grads.user);
        model.item_emb.scaled_add(-lr, &grads.item);
    }
    Ok(loss)
}

/// Adam state for one parameter tensor (PyTorch semantics: L2 decay is added
/// to the gradient before the moment updates).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        AdamState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(param.dim(), grad.dim(), "gradient shape mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g + weight_decay * *p;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Uniform negatives for one user, with replacement, deterministic per seed.
pub fn sample_negatives(
    interactions: &InteractionSet,
    user: u32,
    count: usize,
    seed: u64,
) -> Result<Vec<u32>, ModelError> {
    if user as usize >= interactions.n_users {
        return Err(ModelError::IndexOutOfRange(format!("user {user}")));
    }
    let by_user = interactions.items_by_user();
    let complement = complement_items(&by_user[user as usize], interactions.n_items);
    if complement.is_empty() {
        return Err(ModelError::NoNegativeAvailable(user));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| complement[rng.gen_range(0..complement.len())])
        .collect())
}

fn complement_items(interacted_sorted: &[u32], n_items: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n_items - interacted_sorted.len());
    let mut held = interacted_sorted.iter().peekable();
    for item in 0..n_items as u32 {
        if held.peek() == Some(&&item) {
            held.next();
        } else {
            out.push(item);
        }
    }
    out
}

/// Precomputed per-user complements for the training loop.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    complements: Vec<Vec<u32>>,
}

impl NegativeSampler {
    pub fn new(train: &InteractionSet) -> Self {
        let by_user = train.items_by_user();
        NegativeSampler {
            complements: by_user
                .iter()
                .map(|items| complement_items(items, train.n_items))
                .collect(),
        }
    }

    pub fn draw(&self, user: u32, rng: &mut ChaCha8Rng) -> Result<u32, ModelError> {
        let pool = &self.complements[user as usize];
        if pool.is_empty() {
            return Err(ModelError::NoNegativeAvailable(user));
        }
        Ok(pool[rng.gen_range(0..pool.len())])
    }
}

/// Checkpoint contents; LightGCN models additionally need a propagation
/// operator rebuilt from the training split before they can score.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    /// 0 = BPRMF, 1 = LightGCN
    pub backbone_tag: u32,
    pub layers: usize,
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
}

impl Checkpoint {
    pub fn into_model(self, propagation: Option<CsrMatrix>) -> Result<EmbeddingModel, ModelError> {
        let backbone = match self.backbone_tag {
            0 => Backbone::Bprmf,
            1 => Backbone::LightGcn {
                layers: self.layers,
                propagation: propagation.ok_or(ModelError::MissingPropagation)?,
            },
            tag => return Err(ModelError::BadCheckpoint(format!("unknown backbone {tag}"))),
        };
        Ok(EmbeddingModel {
            user_emb: self.user_emb,
            item_emb: self.item_emb,
            backbone,
        })
    }
}

/// Binary layout: magic `FRQD`, then version, |U|, |I|, d, backbone tag and
/// LightGCN layer count as little-endian u32, then both tables as row-major
/// little-endian f64.
pub fn save_checkpoint(model: &EmbeddingModel, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let layers = match &model.backbone {
        Backbone::Bprmf => 0usize,
        Backbone::LightGcn { layers, .. } => *layers,
    };
    for v in [
        CHECKPOINT_VERSION,
        model.n_users() as u32,
        model.n_items() as u32,
        model.dim() as u32,
        model.backbone.tag(),
        layers as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.user_emb.iter().chain(model.item_emb.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("wrong magic".into()));
    }
    let read_u32 = |file: &mut fs::File| -> Result<u32, ModelError> {
        let mut buf = [0u8; 4];
        file.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    };
    let version = read_u32(&mut file)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n_users = read_u32(&mut file)? as usize;
    let n_items = read_u32(&mut file)? as usize;
    let dim = read_u32(&mut file)? as usize;
    let backbone_tag = read_u32(&mut file)?;
    let layers = read_u32(&mut file)? as usize;

    let mut read_table = |rows: usize| -> Result<Array2<f64>, ModelError> {
        let mut bytes = vec![0u8; rows * dim * 8];
        file.read_exact(&mut bytes)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Array2::from_shape_vec((rows, dim), values)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))
    };
    let user_emb = read_table(n_users)?;
    let item_emb = read_table(n_items)?;
    if user_emb.iter().chain(item_emb.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::BadCheckpoint("non-finite embedding".into()));
    }
    Ok(Checkpoint {
        n_users,
        n_items,
        dim,
        backbone_tag,
        layers,
        user_emb,
        item_emb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, InteractionSet};
    use ndarray::array;

    fn tiny_interactions(pairs: &[(u32, u32)], n_users: usize, n_items: usize) -> InteractionSet {
        InteractionSet {
            interactions: pairs
                .iter()
                .enumerate()
                .map(|(t, &(user, item))| Interaction {
                    user,
                    item,
                    ts: t as i64,
                })
                .collect(),
            n_users,
            n_items,
            user_ids: (0..n_users).map(|u| format!("u{u}")).collect(),
            item_ids: (0..n_items).map(|i| format!("i{i}")).collect(),
        }
    }

    fn bprmf(user: Array2<f64>, item: Array2<f64>) -> EmbeddingModel {
        EmbeddingModel::with_backbone(user, item, Backbone::Bprmf)
    }

    #[test]
    fn dot_product_scoring() {
        let model = bprmf(array![[1.0, 2.0]], array![[3.0, -1.0]]);
        assert_eq!(score(&model, 0, 0).unwrap(), 1.0);
        assert!(matches!(
            score(&model, 1, 0),
            Err(ModelError::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn zero_embeddings_score_zero_and_loss_ln2() {
        let model = bprmf(Array2::zeros((2, 3)), Array2::zeros((4, 3)));
        assert_eq!(score(&model, 1, 3).unwrap(), 0.0);
        let triple = TrainTriple {
            user: 0,
            pos_item: 0,
            neg_item: 1,
        };
        let loss = bpr_loss(&model, &triple).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_vanishes_as_diff_grows() {
        let mut prev = f64::INFINITY;
        for diff in [0.0, 1.0, 5.0, 20.0, 39.0] {
            let loss = bpr_loss_from_diff(diff);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(bpr_loss_from_diff(40.0) < 1e-15);
        // clamp keeps extreme diffs finite
        assert!(bpr_loss_from_diff(1e9).is_finite());
        assert!(bpr_loss_from_diff(-1e9).is_finite());
    }

    #[test]
    fn lightgcn_zero_layers_matches_bprmf() {
        let data = tiny_interactions(&[(0, 0), (0, 1), (1, 1)], 2, 2);
        let propagation = bipartite_propagation(&data).unwrap();
        let mf = EmbeddingModel::init(2, 2, 3, Backbone::Bprmf, 5);
        let gcn = EmbeddingModel::with_backbone(
            mf.user_emb.clone(),
            mf.item_emb.clone(),
            Backbone::LightGcn {
                layers: 0,
                propagation,
            },
        );
        for u in 0..2 {
            for i in 0..2 {
                assert_eq!(score(&mf, u, i).unwrap(), score(&gcn, u, i).unwrap());
            }
        }
    }

    #[test]
    fn lightgcn_matches_hand_propagation_on_k2() {
        // one user, one item, single interaction: normalized adjacency swaps
        // the two stacked rows
        let data = tiny_interactions(&[(0, 0)], 1, 1);
        let propagation = bipartite_propagation(&data).unwrap();
        let model = EmbeddingModel::with_backbone(
            array![[1.0, 0.0]],
            array![[0.0, 1.0]],
            Backbone::LightGcn {
                layers: 1,
                propagation,
            },
        );
        // mean of layer 0 and the swapped layer 1 is (0.5, 0.5) for both rows
        let scorer = model.scorer();
        assert_eq!(scorer.user.row(0).to_vec(), vec![0.5, 0.5]);
        assert_eq!(scorer.item.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((score(&model, 0, 0).unwrap() - 0.5).abs() < 1e-15);
    }

    /// Central finite differences on the mean batch loss.
    fn finite_diff_check(model: &EmbeddingModel, batch: &[TrainTriple]) {
        let (_, grads) = bpr_batch_gradients(model, batch).unwrap();
        let h = 1e-5;
        let loss_at = |m: &EmbeddingModel| {
            let (l, _) = bpr_batch_gradients(m, batch).unwrap();
            l
        };
        let check = |table: &str, r: usize, c: usize, analytic: f64| {
            let mut plus = model.clone();
            let mut minus = model.clone();
            match table {
                "user" => {
                    plus.user_emb[[r, c]] += h;
                    minus.user_emb[[r, c]] -= h;
                }
                _ => {
                    plus.item_emb[[r, c]] += h;
                    minus.item_emb[[r, c]] -= h;
                }
            }
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let scale = numeric.abs().max(analytic.abs());
            if scale > 1e-8 {
                let rel = (numeric - analytic).abs() / scale;
                assert!(
                    rel <= 1e-4,
                    "{table}[{r},{c}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        };
        for r in 0..model.n_users() {
            for c in 0..model.dim() {
                check("user", r, c, grads.user[[r, c]]);
            }
        }
        for r in 0..model.n_items() {
            for c in 0..model.dim() {
                check("item", r, c, grads.item[[r, c]]);
            }
        }
    }

    #[test]
    fn bprmf_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..5 {
            let mut model = EmbeddingModel::init(4, 5, 3, Backbone::Bprmf, 100 + trial);
            // scale up so scores are not degenerate at init
            model.user_emb *= 30.0;
            model.item_emb *= 30.0;
            let batch: Vec<TrainTriple> = (0..6)
                .map(|_| TrainTriple {
                    user: rng.gen_range(0..4),
                    pos_item: rng.gen_range(0..5),
                    neg_item: rng.gen_range(0..5),
                })
                .collect();
            finite_diff_check(&model, &batch);
        }
    }

    #[test]
    fn lightgcn_gradient_matches_finite_differences() {
        let data = tiny_interactions(&[(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)], 3, 3);
        let propagation = bipartite_propagation(&data).unwrap();
        let base = EmbeddingModel::init(3, 3, 2, Backbone::Bprmf, 9);
        let model = EmbeddingModel::with_backbone(
            &base.user_emb * 30.0,
            &base.item_emb * 30.0,
            Backbone::LightGcn {
                layers: 2,
                propagation,
            },
        );
        let batch = vec![
            TrainTriple {
                user: 0,
                pos_item: 0,
                neg_item: 2,
            },
            TrainTriple {
                user: 1,
                pos_item: 2,
                neg_item: 0,
            },
        ];
        finite_diff_check(&model, &batch);
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let mut model = EmbeddingModel::init(3, 4, 2, Backbone::Bprmf, 11);
        let before = model.clone();
        let batch = vec![TrainTriple {
            user: 0,
            pos_item: 1,
            neg_item: 2,
        }];
        train_step(&mut model, &batch, 0.0, 0.1).unwrap();
        assert_eq!(model.user_emb, before.user_emb);
        assert_eq!(model.item_emb, before.item_emb);
    }

    #[test]
    fn small_step_moves_scores_the_right_way() {
        let mut model = EmbeddingModel::init(2, 3, 4, Backbone::Bprmf, 13);
        let triple = TrainTriple {
            user: 0,
            pos_item: 0,
            neg_item: 1,
        };
        let before = model.scorer();
        train_step(&mut model, &[triple], 1e-3, 0.0).unwrap();
        let after = model.scorer();
        assert!(after.score(0, 0) > before.score(0, 0));
        assert!(after.score(0, 1) < before.score(0, 1));
    }

    #[test]
    fn replayed_steps_are_bitwise_identical() {
        let batch = vec![
            TrainTriple {
                user: 0,
                pos_item: 0,
                neg_item: 3,
            },
            TrainTriple {
                user: 1,
                pos_item: 2,
                neg_item: 1,
            },
        ];
        let run = || {
            let mut model = EmbeddingModel::init(2, 4, 3, Backbone::Bprmf, 21);
            train_step(&mut model, &batch, 0.01, 1e-4).unwrap();
            train_step(&mut model, &batch, 0.01, 1e-4).unwrap();
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a.user_emb, b.user_emb);
        assert_eq!(a.item_emb, b.item_emb);
    }

    #[test]
    fn decay_only_step_shrinks_norms_exactly() {
        let mut model = EmbeddingModel::init(3, 3, 2, Backbone::Bprmf, 17);
        let before = model.clone();
        let (lr, wd) = (0.1, 0.05);
        train_step(&mut model, &[], lr, wd).unwrap();
        let factor = 1.0 - lr * wd;
        for (a, b) in model.user_emb.iter().zip(before.user_emb.iter()) {
            assert_eq!(*a, b * factor);
        }
        for (a, b) in model.item_emb.iter().zip(before.item_emb.iter()) {
            assert_eq!(*a, b * factor);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut param = array![[1.0, -1.0]];
        let grad = array![[0.5, -0.5]];
        let mut state = AdamState::new((1, 2));
        state.step(&mut param, &grad, 0.01, 0.0);
        assert!(param[[0, 0]] < 1.0);
        assert!(param[[0, 1]] > -1.0);
    }

    #[test]
    fn negatives_cover_only_valid_pool() {
        let data = tiny_interactions(&[(0, 0), (0, 1), (0, 2)], 1, 4);
        let draws = sample_negatives(&data, 0, 50, 3).unwrap();
        assert!(draws.iter().all(|&i| i == 3));

        let full = tiny_interactions(&[(0, 0), (0, 1)], 1, 2);
        assert!(matches!(
            sample_negatives(&full, 0, 1, 3),
            Err(ModelError::NoNegativeAvailable(0))
        ));
    }

    #[test]
    fn negatives_are_seed_deterministic_and_uniform() {
        let data = tiny_interactions(&[(0, 0)], 1, 6);
        let a = sample_negatives(&data, 0, 100, 9).unwrap();
        let b = sample_negatives(&data, 0, 100, 9).unwrap();
        assert_eq!(a, b);

        // statistical oracle: each of the 5 candidates is Binomial(n, 1/5);
        // counts must sit within 3 sigma of the mean
        let n = 100_000;
        let draws = sample_negatives(&data, 0, n, 10).unwrap();
        let mut counts = [0usize; 6];
        for d in &draws {
            counts[*d as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 5.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (item, &count) in counts.iter().enumerate().skip(1) {
            let dev = (count as f64 - mean).abs();
            assert!(dev <= 3.0 * sigma, "item {item} deviates {dev}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = EmbeddingModel::init(5, 7, 3, Backbone::Bprmf, 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FRQD");
        assert_eq!(bytes.len(), 4 + 6 * 4 + (5 + 7) * 3 * 8);

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.backbone_tag, 0);
        let restored = ckpt.into_model(None).unwrap();
        assert_eq!(restored.user_emb, model.user_emb);
        assert_eq!(restored.item_emb, model.item_emb);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn lightgcn_checkpoint_needs_propagation() {
        let data = tiny_interactions(&[(0, 0), (1, 0)], 2, 1);
        let propagation = bipartite_propagation(&data).unwrap();
        let model = EmbeddingModel::with_backbone(
            Array2::zeros((2, 2)),
            Array2::zeros((1, 2)),
            Backbone::LightGcn {
                layers: 2,
                propagation,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gcn.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.layers, 2);
        assert!(matches!(
            ckpt.clone().into_model(None),
            Err(ModelError::MissingPropagation)
        ));
        let rebuilt = bipartite_propagation(&data).unwrap();
        assert!(ckpt.into_model(Some(rebuilt)).is_ok());
    }
}
