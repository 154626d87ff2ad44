//! Batch loss and gradients of the combined objective.
//!
//! Each item's encoder and decoder passes get their own tape, built in
//! parallel. The end states feed a second, small tape holding the coherence
//! heads. Its input gradients are then pushed back through every item tape,
//! again in parallel, and the per-item parameter gradients are summed in item
//! order so the result does not depend on scheduling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::coherence::{enumerate_pairs_meta, CoherenceConfig, LossBreakdown, PairMeta, PairScorer, PairSet};
use crate::decoder::{eos_index, output_mask, targets};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureStore};
use crate::layers::Dropout;
use crate::model::{ConCaps, ItemInput};
use crate::parallel::{map_range, Parallelism};
use crate::params::Grads;
use crate::sampler::Batch;
use crate::tensor::Mat;

/// In-memory feature bundles keyed by feature key.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    map: BTreeMap<String, Arc<FeatureBundle>>,
}

impl FeatureCache {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, FeatureBundle)>) -> Self {
        Self {
            map: pairs.into_iter().map(|(k, b)| (k, Arc::new(b))).collect(),
        }
    }

    /// Loads every bundle listed in the store's manifest, verifying checksums.
    pub fn from_store(store: &FeatureStore) -> Result<Self> {
        let keys: Vec<String> = store.keys().map(str::to_string).collect();
        let mut map = BTreeMap::new();
        for k in keys {
            let b = store.load_verified(&k)?;
            map.insert(k, Arc::new(b));
        }
        Ok(Self { map })
    }

    pub fn get(&self, key: &str) -> Result<Arc<FeatureBundle>> {
        self.map
            .get(key)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("feature key {key:?}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A batch item with tokens mapped to ids and features resolved.
#[derive(Clone, Debug)]
pub struct PreparedItem {
    pub txt: Vec<usize>,
    pub true_ids: Vec<usize>,
    pub fake_ids: Option<Vec<usize>>,
    pub bundle: Arc<FeatureBundle>,
    pub doc_index: usize,
    pub img_index: usize,
}

impl PreparedItem {
    pub fn meta(&self) -> PairMeta {
        PairMeta {
            doc_index: self.doc_index,
            img_index: self.img_index,
            has_fake: self.fake_ids.is_some(),
        }
    }

    pub fn input(&self) -> ItemInput<'_> {
        ItemInput {
            txt: &self.txt,
            bundle: &self.bundle,
        }
    }
}

pub fn prepare_batch(model: &ConCaps, batch: &Batch, features: &FeatureCache) -> Result<Vec<PreparedItem>> {
    batch
        .items
        .iter()
        .map(|it| {
            Ok(PreparedItem {
                txt: model.vocab.encode(&it.txt),
                true_ids: model.vocab.encode(&it.true_cap),
                fake_ids: it.fake_cap.as_ref().map(|f| model.vocab.encode(f)),
                bundle: features.get(&it.feature_key)?,
                doc_index: it.doc_index,
                img_index: it.img_index,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveOptions {
    pub parallelism: Parallelism,
    pub with_grads: bool,
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub loss: LossBreakdown,
    pub grads: Option<Grads>,
    pub gen_targets: usize,
    pub pairs: PairSet,
    /// Whether each head was actually evaluated.
    pub scorers_invoked: [bool; 3],
}

struct ItemTape<'p> {
    graph: Graph<'p>,
    gen: Option<Var>,
    end_true: Option<Var>,
    end_fake: Option<Var>,
}

/// Evaluates the combined loss on one batch and, optionally, its gradient
/// with respect to every parameter. Components whose λ is 0 are not built.
pub fn batch_objective(
    model: &ConCaps,
    items: &[PreparedItem],
    cfg: &CoherenceConfig,
    opts: ObjectiveOptions,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let metas: Vec<PairMeta> = items.iter().map(PreparedItem::meta).collect();
    let pairs = enumerate_pairs_meta(&metas, cfg.w);
    let need_gen = cfg.lambda_gen > 0.0;
    let need_vert = cfg.lambda_vert > 0.0 && metas.iter().any(|m| m.has_fake);
    let need_h1 = cfg.lambda_hori1 > 0.0 && !(pairs.hori_pos.is_empty() && pairs.hori_neg1.is_empty());
    let need_h2 = cfg.lambda_hori2 > 0.0 && !(pairs.hori_pos.is_empty() && pairs.hori_neg2.is_empty());
    let need_states = need_vert || need_h1 || need_h2;
    let mut need_fake: Vec<bool> = metas.iter().map(|m| need_vert && m.has_fake).collect();
    if need_h1 {
        for &(_, j) in &pairs.hori_neg1 {
            need_fake[j] = true;
        }
    }
    let mask = output_mask(model.vocab.len());
    let rate = model.spec.model.dropout;

    let tapes: Vec<Result<ItemTape>> = map_range(opts.parallelism, items.len(), |i| {
        let item = &items[i];
        let mut g = Graph::new(&model.params);
        let mut rng = opts
            .dropout_seed
            .map(|s| ChaCha8Rng::seed_from_u64(s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut dropout = rng.as_mut().filter(|_| rate > 0.0).map(|r| Dropout { rate, rng: r });
        let mem = model.memory(&mut g, item.input())?;
        let (states, logits) = model.decode_on(&mut g, mem, &item.true_ids, dropout.as_mut())?;
        let gen = need_gen.then(|| g.nll(logits, &targets(&item.true_ids), &mask));
        let end_true = if need_states {
            Some(g.row(states, end_position(&item.true_ids)?))
        } else {
            None
        };
        let end_fake = match (&item.fake_ids, need_fake[i]) {
            (Some(fake), true) => {
                let (fs, _) = model.decode_on(&mut g, mem, fake, dropout.as_mut())?;
                Some(g.row(fs, end_position(fake)?))
            }
            _ => None,
        };
        Ok(ItemTape {
            graph: g,
            gen,
            end_true,
            end_fake,
        })
    });
    let tapes: Vec<ItemTape> = tapes.into_iter().collect::<Result<_>>()?;

    let gen_value: f64 = tapes
        .iter()
        .filter_map(|t| t.gen.map(|v| t.graph.value(v).item()))
        .sum();
    let gen_targets = items
        .iter()
        .map(|it| targets(&it.true_ids).iter().flatten().count())
        .sum();

    let mut vert = 0.0;
    let mut hori1 = 0.0;
    let mut hori2 = 0.0;
    let mut seeds_true: Vec<Option<Mat>> = vec![None; items.len()];
    let mut seeds_fake: Vec<Option<Mat>> = vec![None; items.len()];
    let mut grads = opts.with_grads.then(|| Grads::new(model.params.len()));

    if need_states {
        let mut cg = Graph::new(&model.params);
        let true_leaves: Vec<Var> = tapes
            .iter()
            .map(|t| cg.input(t.graph.value(t.end_true.expect("end state built")).clone()))
            .collect();
        let mut fake_row = vec![None; items.len()];
        let mut fake_leaves = Vec::new();
        for (i, t) in tapes.iter().enumerate() {
            if let Some(v) = t.end_fake {
                fake_row[i] = Some(fake_leaves.len());
                fake_leaves.push(cg.input(t.graph.value(v).clone()));
            }
        }
        let tt = cg.concat_rows(&true_leaves);
        let ff = (!fake_leaves.is_empty()).then(|| cg.concat_rows(&fake_leaves));
        let fake_of = |j: usize| fake_row[j].expect("fake state built");

        let mut terms = Vec::new();
        if need_vert {
            let with_fake: Vec<usize> = (0..items.len()).filter(|&i| metas[i].has_fake).collect();
            let rows: Vec<usize> = with_fake.iter().map(|&i| fake_of(i)).collect();
            let xt = cg.gather(tt, &with_fake);
            let xf = cg.gather(ff.expect("fakes present"), &rows);
            let x = cg.concat_rows(&[xt, xf]);
            let labels: Vec<bool> = with_fake.iter().map(|_| true).chain(with_fake.iter().map(|_| false)).collect();
            let v = scored_bce(&mut cg, &model.vert, x, &labels);
            vert = cg.value(v).item();
            terms.push((v, cfg.lambda_vert));
        }
        if need_h1 {
            let mut blocks = Vec::new();
            let mut labels = Vec::new();
            if !pairs.hori_pos.is_empty() {
                blocks.push(pair_rows(&mut cg, tt, tt, &pairs.hori_pos, |j| j));
                labels.extend(pairs.hori_pos.iter().map(|_| true));
            }
            if !pairs.hori_neg1.is_empty() {
                let right = ff.expect("fakes present");
                blocks.push(pair_rows(&mut cg, tt, right, &pairs.hori_neg1, fake_of));
                labels.extend(pairs.hori_neg1.iter().map(|_| false));
            }
            let x = if blocks.len() == 1 { blocks[0] } else { cg.concat_rows(&blocks) };
            let v = scored_bce(&mut cg, &model.hori1, x, &labels);
            hori1 = cg.value(v).item();
            terms.push((v, cfg.lambda_hori1));
        }
        if need_h2 {
            let mut blocks = Vec::new();
            let mut labels = Vec::new();
            if !pairs.hori_pos.is_empty() {
                blocks.push(pair_rows(&mut cg, tt, tt, &pairs.hori_pos, |j| j));
                labels.extend(pairs.hori_pos.iter().map(|_| true));
            }
            if !pairs.hori_neg2.is_empty() {
                blocks.push(pair_rows(&mut cg, tt, tt, &pairs.hori_neg2, |j| j));
                labels.extend(pairs.hori_neg2.iter().map(|_| false));
            }
            let x = if blocks.len() == 1 { blocks[0] } else { cg.concat_rows(&blocks) };
            let v = scored_bce(&mut cg, &model.hori2, x, &labels);
            hori2 = cg.value(v).item();
            terms.push((v, cfg.lambda_hori2));
        }
        if let Some(grads) = grads.as_mut() {
            let total = cg.weighted_sum(&terms);
            let bw = cg.backward(&[(total, Mat::scalar(1.0))]);
            grads.merge(&cg.param_grads(&bw));
            for (i, leaf) in true_leaves.iter().enumerate() {
                seeds_true[i] = bw.grad(*leaf).cloned();
            }
            for (i, row) in fake_row.iter().enumerate() {
                if let Some(r) = row {
                    seeds_fake[i] = bw.grad(fake_leaves[*r]).cloned();
                }
            }
        }
    }

    if let Some(grads) = grads.as_mut() {
        let per_item: Vec<Grads> = map_range(opts.parallelism, tapes.len(), |i| {
            let t = &tapes[i];
            let mut seeds = Vec::new();
            if let Some(v) = t.gen {
                seeds.push((v, Mat::scalar(cfg.lambda_gen)));
            }
            if let (Some(v), Some(s)) = (t.end_true, &seeds_true[i]) {
                seeds.push((v, s.clone()));
            }
            if let (Some(v), Some(s)) = (t.end_fake, &seeds_fake[i]) {
                seeds.push((v, s.clone()));
            }
            if seeds.is_empty() {
                return Grads::new(model.params.len());
            }
            let bw = t.graph.backward(&seeds);
            t.graph.param_grads(&bw)
        });
        for g in &per_item {
            grads.merge(g);
        }
    }

    Ok(ObjectiveOutput {
        loss: LossBreakdown::combine(cfg, gen_value, vert, hori1, hori2),
        grads,
        gen_targets,
        pairs,
        scorers_invoked: [need_vert, need_h1, need_h2],
    })
}

fn end_position(ids: &[usize]) -> Result<usize> {
    eos_index(ids).ok_or_else(|| Error::Contract("caption has no </s> token".into()))
}

/// Rows `[left[i], right[map(j)]]` for each pair `(i, j)`.
fn pair_rows(g: &mut Graph, left: Var, right: Var, pairs: &[(usize, usize)], map: impl Fn(usize) -> usize) -> Var {
    let li: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ri: Vec<usize> = pairs.iter().map(|p| map(p.1)).collect();
    let l = g.gather(left, &li);
    let r = g.gather(right, &ri);
    g.concat_cols(&[l, r])
}

fn scored_bce(g: &mut Graph, scorer: &PairScorer, x: Var, labels: &[bool]) -> Var {
    let logits = scorer.forward(g, x);
    g.bce(logits, labels)
}

/// Teacher-forced next-token accuracy: `(correct, total)` over non-pad
/// targets, argmax taken over the output mask.
pub fn teacher_forced_accuracy(model: &ConCaps, items: &[PreparedItem], mode: Parallelism) -> Result<(usize, usize)> {
    let mask = output_mask(model.vocab.len());
    let per: Vec<Result<(usize, usize)>> = map_range(mode, items.len(), |i| {
        let item = &items[i];
        let out = crate::model::decoder_forward(model, &item.true_ids, item.input())?;
        let mut correct = 0;
        let mut total = 0;
        for (t, target) in targets(&item.true_ids).into_iter().enumerate() {
            let Some(y) = target else { continue };
            let row = out.logits.row(t);
            let best = (0..row.len())
                .filter(|&c| mask[c])
                .fold(None::<usize>, |acc, c| match acc {
                    Some(b) if row[b] >= row[c] => Some(b),
                    _ => Some(c),
                })
                .expect("non-empty mask");
            correct += usize::from(best == y);
            total += 1;
        }
        Ok((correct, total))
    });
    per.into_iter()
        .try_fold((0, 0), |(c, t), r| r.map(|(c2, t2)| (c + c2, t + t2)))
}
