//! Training drivers: plain BPR training, distilled training (FitNet or
//! filtered features), and group-ablation training on the explicit spectral
//! path. One loop backs all of them so that switching the distillation term
//! off reproduces plain training bit for bit.
//!
//! Randomness is split into independent ChaCha streams of one master seed:
//! stream 1 shuffles, stream 2 samples negatives, stream 3 seeds edge
//! dropout, stream 4 initializes projectors. Adding or removing the
//! graph-dependent streams therefore never perturbs the others.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::SplitDataset;
use crate::distill::{
    fitnet_residual, freqd_residual, project, reweighted_residual, DistillConfig, DistillError,
    GraphSource, LossScope, Projector, Residual, WeightScheme,
};
use crate::eval::{evaluate, EvalTarget};
use crate::filter::GraphFilter;
use crate::graph::{
    build_bipartite_graph, build_knn_graph, edge_dropout, normalized_laplacian, stack_features,
    FeatureMatrix, GraphError, GraphKind, Laplacian, SparseGraph,
};
use crate::models::{
    bpr_batch_gradients, AdamState, EmbeddingModel, ModelError, NegativeSampler, TrainTriple,
};
use crate::spectral::{eigendecompose, KnowledgeGroups, SpectralDecomposition, SpectralError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} (base {base}, distill {distill})")]
    NonFiniteLoss { epoch: usize, base: f64, distill: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

/// One row of the run log.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub base_loss: f64,
    pub freqd_loss: f64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
}

/// CSV with one row per epoch.
pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,base_loss,freqd_loss,val_recall@20,val_ndcg@20\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.base_loss, r.freqd_loss, r.val_recall20, r.val_ndcg20
        ));
    }
    out
}

/// One projector per entity type.
#[derive(Debug, Clone)]
pub struct EntityProjectors {
    pub user: Projector,
    pub item: Projector,
}

/// Best-validation model plus the full epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub projectors: Option<EntityProjectors>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
}

/// Plain BPR training with Adam and NDCG@20 early stopping.
pub fn train_plain(
    student: EmbeddingModel,
    split: &SplitDataset,
    cfg: &crate::distill::TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let dcfg = DistillConfig {
        train: cfg.clone(),
        ..DistillConfig::default()
    };
    fit(student, split, &dcfg, None, seed)
}

/// Feature distillation against a frozen teacher with the filtered loss
/// (Algorithm: build graphs, filter teacher once per epoch, filter projected
/// student per batch, add the weighted term to the BPR objective).
pub fn distill_train(
    teacher: &EmbeddingModel,
    student: EmbeddingModel,
    split: &SplitDataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    fit(student, split, cfg, Some((teacher, Mode::FreqD)), seed)
}

/// Plain MSE feature distillation (no graph, no filter).
pub fn fitnet_train(
    teacher: &EmbeddingModel,
    student: EmbeddingModel,
    split: &SplitDataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    fit(student, split, cfg, Some((teacher, Mode::FitNet)), seed)
}

/// Distillation with explicit per-group weights on the spectral path. Needs
/// node counts within the desk-scale eigendecomposition cap.
pub fn group_ablation_train(
    teacher: &EmbeddingModel,
    student: EmbeddingModel,
    split: &SplitDataset,
    cfg: &DistillConfig,
    scheme: WeightScheme,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    fit(
        student,
        split,
        cfg,
        Some((teacher, Mode::Ablation(scheme))),
        seed,
    )
}

#[derive(Debug, Clone, Copy)]
enum Mode {
    FitNet,
    FreqD,
    Ablation(WeightScheme),
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One distillation channel: a node set with teacher features and per-epoch
/// graph state. TeacherKnn uses two channels (users, items); Bipartite uses
/// one stacked channel.
struct Channel {
    base_graph: Option<SparseGraph>,
    teacher_features: FeatureMatrix,
    lap: Option<Laplacian>,
    filtered_teacher: Option<FeatureMatrix>,
    dec: Option<SpectralDecomposition>,
    weights: Option<Vec<f64>>,
}

impl Channel {
    fn new(base_graph: Option<SparseGraph>, teacher_features: FeatureMatrix) -> Self {
        Channel {
            base_graph,
            teacher_features,
            lap: None,
            filtered_teacher: None,
            dec: None,
            weights: None,
        }
    }

    /// Resamples dropout and refreshes everything derived from the graph.
    fn refresh(
        &mut self,
        mode: &Mode,
        filter: &GraphFilter,
        dropout_rate: f64,
        dropout_rng: &mut ChaCha8Rng,
        first_epoch: bool,
    ) -> Result<(), TrainError> {
        let base = match &self.base_graph {
            Some(g) => g,
            None => return Ok(()), // FitNet channel: nothing graph-derived
        };
        if !first_epoch && dropout_rate == 0.0 {
            return Ok(()); // graph unchanged, keep cached state
        }
        let graph = if dropout_rate > 0.0 {
            edge_dropout(base, dropout_rate, dropout_rng.gen::<u64>())
        } else {
            base.clone()
        };
        let lap = normalized_laplacian(&graph)?;
        match mode {
            Mode::FreqD => {
                self.filtered_teacher = Some(crate::filter::apply_filter(
                    filter,
                    &lap,
                    &self.teacher_features,
                )?);
            }
            Mode::Ablation(scheme) => {
                let dec = eigendecompose(&lap)?;
                let groups = KnowledgeGroups::new(dec.n());
                self.weights = Some(groups.broadcast(scheme.group_weights));
                self.dec = Some(dec);
            }
            Mode::FitNet => {}
        }
        self.lap = Some(lap);
        Ok(())
    }
}

/// Distillation state across the epoch loop.
struct Distiller {
    mode: Mode,
    channels: Vec<Channel>,
    proj_user: Projector,
    proj_item: Projector,
    adam_user: AdamState,
    adam_item: AdamState,
    n_users: usize,
}

impl Distiller {
    fn new(
        teacher: &EmbeddingModel,
        student: &EmbeddingModel,
        split: &SplitDataset,
        cfg: &DistillConfig,
        mode: Mode,
        proj_rng: &mut ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        let d_s = student.dim();
        let d_t = teacher.dim();
        let proj_user = Projector::init_with_rng(d_s, d_t, proj_rng);
        let proj_item = Projector::init_with_rng(d_s, d_t, proj_rng);

        let channels = match (&mode, cfg.graph_source) {
            (Mode::FitNet, _) => vec![
                Channel::new(None, teacher.user_emb.clone()),
                Channel::new(None, teacher.item_emb.clone()),
            ],
            (_, GraphSource::TeacherKnn { k }) => {
                let user_graph = build_knn_graph(&teacher.user_emb, k, GraphKind::UserKnn)?;
                let item_graph = build_knn_graph(&teacher.item_emb, k, GraphKind::ItemKnn)?;
                vec![
                    Channel::new(Some(user_graph), teacher.user_emb.clone()),
                    Channel::new(Some(item_graph), teacher.item_emb.clone()),
                ]
            }
            (_, GraphSource::Bipartite) => {
                let graph = build_bipartite_graph(&split.train)?;
                let stacked = stack_features(&teacher.user_emb, &teacher.item_emb);
                vec![Channel::new(Some(graph), stacked)]
            }
        };
        Ok(Distiller {
            mode,
            channels,
            adam_user: AdamState::new((d_s, d_t)),
            adam_item: AdamState::new((d_s, d_t)),
            proj_user,
            proj_item,
            n_users: student.n_users(),
        })
    }

    fn refresh_epoch(
        &mut self,
        cfg: &DistillConfig,
        dropout_rng: &mut ChaCha8Rng,
        first_epoch: bool,
    ) -> Result<(), TrainError> {
        for channel in &mut self.channels {
            channel.refresh(
                &self.mode,
                &cfg.filter,
                cfg.dropout_rate,
                dropout_rng,
                first_epoch,
            )?;
        }
        Ok(())
    }

    /// Distillation loss and beta-unscaled gradients for one batch, plus the
    /// staged projector gradients for [`Self::step_projectors`].
    ///
    /// Each channel's squared error is divided by its in-scope row count, so
    /// the term stays on the scale of a per-entity error and beta keeps the
    /// meaning it has in the reference hyperparameter grid.
    fn compute_batch(
        &self,
        student: &EmbeddingModel,
        rows_user: &[usize],
        rows_item: &[usize],
        cfg: &DistillConfig,
    ) -> Result<(f64, FeatureMatrix, FeatureMatrix, ProjectorGrads), TrainError> {
        if self.channels.len() == 1 {
            // stacked bipartite channel
            let channel = &self.channels[0];
            let stacked_rows: Vec<usize> = rows_user
                .iter()
                .copied()
                .chain(rows_item.iter().map(|&i| i + self.n_users))
                .collect();
            let scope: Option<&[usize]> = match cfg.loss_scope {
                LossScope::Full => None,
                LossScope::Batch => Some(&stacked_rows),
            };
            let norm = 1.0 / scope.map_or(channel.teacher_features.nrows(), <[usize]>::len) as f64;
            let p = stack_features(
                &project(&self.proj_user, &student.user_emb)?,
                &project(&self.proj_item, &student.item_emb)?,
            );
            let residual = self.residual(channel, &p, &cfg.filter, scope)?;
            let (g_user, g_item) = unstack(&residual.g_projected, self.n_users);
            let grad_user = g_user.dot(&self.proj_user.weight.t()) * norm;
            let grad_item = g_item.dot(&self.proj_item.weight.t()) * norm;
            let proj = ProjectorGrads {
                user: student.user_emb.t().dot(&g_user) * norm,
                item: student.item_emb.t().dot(&g_item) * norm,
            };
            Ok((residual.loss * norm, grad_user, grad_item, proj))
        } else {
            // per-entity channels: users then items, losses summed equally
            let scope_user: Option<&[usize]> = match cfg.loss_scope {
                LossScope::Full => None,
                LossScope::Batch => Some(rows_user),
            };
            let scope_item: Option<&[usize]> = match cfg.loss_scope {
                LossScope::Full => None,
                LossScope::Batch => Some(rows_item),
            };
            let norm_user =
                1.0 / scope_user.map_or(student.n_users(), <[usize]>::len) as f64;
            let norm_item =
                1.0 / scope_item.map_or(student.n_items(), <[usize]>::len) as f64;
            let p_user = project(&self.proj_user, &student.user_emb)?;
            let r_user = self.residual(&self.channels[0], &p_user, &cfg.filter, scope_user)?;
            let p_item = project(&self.proj_item, &student.item_emb)?;
            let r_item = self.residual(&self.channels[1], &p_item, &cfg.filter, scope_item)?;

            let grad_user = r_user.g_projected.dot(&self.proj_user.weight.t()) * norm_user;
            let grad_item = r_item.g_projected.dot(&self.proj_item.weight.t()) * norm_item;
            let proj = ProjectorGrads {
                user: student.user_emb.t().dot(&r_user.g_projected) * norm_user,
                item: student.item_emb.t().dot(&r_item.g_projected) * norm_item,
            };
            Ok((
                r_user.loss * norm_user + r_item.loss * norm_item,
                grad_user,
                grad_item,
                proj,
            ))
        }
    }

    fn residual(
        &self,
        channel: &Channel,
        p: &FeatureMatrix,
        filter: &GraphFilter,
        rows: Option<&[usize]>,
    ) -> Result<Residual, TrainError> {
        match &self.mode {
            Mode::FitNet => Ok(fitnet_residual(p, &channel.teacher_features, rows)),
            Mode::FreqD => {
                let lap = channel.lap.as_ref().expect("channel refreshed");
                let ht = channel.filtered_teacher.as_ref().expect("channel refreshed");
                Ok(freqd_residual(p, ht, filter, lap, rows)?)
            }
            Mode::Ablation(_) => {
                let dec = channel.dec.as_ref().expect("channel refreshed");
                let weights = channel.weights.as_ref().expect("channel refreshed");
                Ok(reweighted_residual(
                    p,
                    &channel.teacher_features,
                    dec,
                    weights,
                    rows,
                ))
            }
        }
    }

    fn step_projectors(&mut self, grads: ProjectorGrads, beta: f64, lr: f64, weight_decay: f64) {
        let scaled_user = grads.user * beta;
        let scaled_item = grads.item * beta;
        self.adam_user
            .step(&mut self.proj_user.weight, &scaled_user, lr, weight_decay);
        self.adam_item
            .step(&mut self.proj_item.weight, &scaled_item, lr, weight_decay);
    }

    fn projectors(&self) -> EntityProjectors {
        EntityProjectors {
            user: self.proj_user.clone(),
            item: self.proj_item.clone(),
        }
    }
}

struct ProjectorGrads {
    user: FeatureMatrix,
    item: FeatureMatrix,
}

fn unstack(stacked: &FeatureMatrix, n_users: usize) -> (FeatureMatrix, FeatureMatrix) {
    (
        stacked.slice(ndarray::s![..n_users, ..]).to_owned(),
        stacked.slice(ndarray::s![n_users.., ..]).to_owned(),
    )
}

/// The shared loop. `distill = None` is plain training; `beta = 0` disables
/// the distillation term entirely, so both run the same instruction stream.
fn fit(
    mut student: EmbeddingModel,
    split: &SplitDataset,
    cfg: &DistillConfig,
    distill: Option<(&EmbeddingModel, Mode)>,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let tcfg = &cfg.train;
    assert!(tcfg.patience >= 1, "patience must be >= 1");
    assert!(tcfg.batch_size >= 1, "batch size must be >= 1");

    let mut shuffle_rng = stream(seed, 1);
    let mut neg_rng = stream(seed, 2);
    let mut dropout_rng = stream(seed, 3);
    let mut proj_rng = stream(seed, 4);

    let sampler = NegativeSampler::new(&split.train);
    let pairs: Vec<(u32, u32)> = split.train.pairs().collect();

    let active = distill.is_some() && cfg.beta != 0.0;
    let mut distiller = match (&distill, active) {
        (Some((teacher, mode)), true) => Some(Distiller::new(
            teacher,
            &student,
            split,
            cfg,
            *mode,
            &mut proj_rng,
        )?),
        _ => None,
    };

    let mut adam_user = AdamState::new(student.user_emb.dim());
    let mut adam_item = AdamState::new(student.item_emb.dim());

    let mut log = Vec::new();
    let mut best_model = student.clone();
    let mut best_projectors = distiller.as_ref().map(|d| d.projectors());
    let mut best_epoch = 0usize;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut stall = 0usize;

    for epoch in 1..=tcfg.max_epochs {
        if let Some(d) = &mut distiller {
            d.refresh_epoch(cfg, &mut dropout_rng, epoch == 1)?;
        }

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut base_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let mut triples = Vec::with_capacity(chunk.len() * tcfg.negatives);
            for &idx in chunk {
                let (user, pos_item) = pairs[idx];
                for _ in 0..tcfg.negatives {
                    let neg_item = sampler.draw(user, &mut neg_rng)?;
                    triples.push(TrainTriple {
                        user,
                        pos_item,
                        neg_item,
                    });
                }
            }
            let (base_loss, base_grads) = bpr_batch_gradients(&student, &triples)?;
            let mut user_grad = base_grads.user;
            let mut item_grad = base_grads.item;

            let mut distill_loss = 0.0;
            let mut proj_grads = None;
            if let Some(d) = &distiller {
                let rows_user = sorted_unique(triples.iter().map(|t| t.user as usize));
                let rows_item = sorted_unique(
                    triples
                        .iter()
                        .flat_map(|t| [t.pos_item as usize, t.neg_item as usize]),
                );
                let (loss, g_user, g_item, proj) =
                    d.compute_batch(&student, &rows_user, &rows_item, cfg)?;
                distill_loss = loss;
                user_grad.scaled_add(cfg.beta, &g_user);
                item_grad.scaled_add(cfg.beta, &g_item);
                proj_grads = Some(proj);
            }

            if !base_loss.is_finite() || !distill_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    base: base_loss,
                    distill: distill_loss,
                });
            }

            adam_user.step(&mut student.user_emb, &user_grad, tcfg.lr, tcfg.weight_decay);
            adam_item.step(&mut student.item_emb, &item_grad, tcfg.lr, tcfg.weight_decay);
            if let (Some(d), Some(proj)) = (&mut distiller, proj_grads) {
                d.step_projectors(proj, cfg.beta, tcfg.lr, tcfg.weight_decay);
            }
            base_sum += base_loss;
            distill_sum += distill_loss;
            batches += 1;
        }

        let table = evaluate(&student, split, EvalTarget::Validation, &[20]);
        let recall20 = table.recall_at(20).unwrap_or(0.0);
        let ndcg20 = table.ndcg_at(20).unwrap_or(0.0);
        let denom = batches.max(1) as f64;
        log.push(EpochRecord {
            epoch,
            base_loss: base_sum / denom,
            freqd_loss: distill_sum / denom,
            val_recall20: recall20,
            val_ndcg20: ndcg20,
        });

        if ndcg20 > best_ndcg {
            best_ndcg = ndcg20;
            best_epoch = epoch;
            best_model = student.clone();
            best_projectors = distiller.as_ref().map(|d| d.projectors());
            stall = 0;
        } else {
            stall += 1;
            if stall >= tcfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        projectors: best_projectors,
        log,
        best_epoch,
        best_val_ndcg: if best_ndcg.is_finite() { best_ndcg } else { 0.0 },
    })
}

fn sorted_unique(items: impl Iterator<Item = usize>) -> Vec<usize> {
    let set: BTreeSet<usize> = items.collect();
    set.into_iter().collect()
}
