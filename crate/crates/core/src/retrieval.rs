//! Cosine scoring against a candidate database, ranking, recall@K and the
//! in-batch cross-entropy loss.

use std::collections::HashMap;

use crate::autodiff::{Graph, Real, Tensor, Var, COSINE_EPS};
use crate::error::{Error, Result};

/// Candidate features with stable integer ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateDb {
    ids: Vec<u32>,
    features: Vec<f32>,
    dim: usize,
    index: HashMap<u32, usize>,
}

impl CandidateDb {
    pub fn new(ids: Vec<u32>, features: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || ids.len() < 2 || features.len() != ids.len() * dim {
            return Err(Error::Invalid(format!(
                "candidate db needs at least 2 items of dimension {dim}, got {} ids and {} values",
                ids.len(),
                features.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Invalid(format!("duplicate candidate id {id}")));
            }
        }
        Ok(Self {
            ids,
            features,
            dim,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.index.contains_key(&id)
    }

    pub fn feature(&self, id: u32) -> Option<&[f32]> {
        self.index.get(&id).map(|&i| self.row(i))
    }
}

/// Candidate ids ordered by descending score, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
}

impl RankingResult {
    /// Zero-based rank of `id`.
    pub fn position(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn top(&self, k: usize) -> &[u32] {
        &self.ids[..k.min(self.ids.len())]
    }
}

/// Plain cosine similarity; rejects vectors with norm at or below the
/// cosine epsilon.
pub fn cosine<A: Real, B: Real>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[&[a.len()], &[b.len()]]));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na <= COSINE_EPS || nb <= COSINE_EPS {
        return Err(Error::degenerate("cosine", "zero-norm vector"));
    }
    Ok(dot / (na * nb).max(COSINE_EPS))
}

/// Cosine score of `query` against every candidate, in database order.
pub fn similarity_scores<T: Real>(query: &[T], db: &CandidateDb) -> Result<Vec<f64>> {
    if query.len() != db.dim() {
        return Err(Error::shape("similarity_scores", &[&[query.len()], &[db.dim()]]));
    }
    (0..db.len()).map(|i| cosine(query, db.row(i))).collect()
}

pub fn rank(ids: &[u32], scores: &[f64]) -> Result<RankingResult> {
    if ids.len() != scores.len() {
        return Err(Error::shape("rank", &[&[ids.len()], &[scores.len()]]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("rank: non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    Ok(RankingResult {
        ids: order.iter().map(|&i| ids[i]).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    })
}

/// Scores and ranks `query` against the whole database.
pub fn retrieve<T: Real>(query: &[T], db: &CandidateDb) -> Result<RankingResult> {
    rank(db.ids(), &similarity_scores(query, db)?)
}

/// Fraction of queries whose target is among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[RankingResult], targets: &[u32], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("recall_at_k: k must be at least 1".into()));
    }
    if rankings.len() != targets.len() {
        return Err(Error::shape("recall_at_k", &[&[rankings.len()], &[targets.len()]]));
    }
    if rankings.is_empty() {
        return Err(Error::Invalid("recall_at_k: no queries".into()));
    }
    let mut hits = 0usize;
    for (r, &t) in rankings.iter().zip(targets) {
        let pos = r
            .position(t)
            .ok_or_else(|| Error::Invalid(format!("recall_at_k: target {t} not in ranking")))?;
        if pos < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

fn check_rows<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let d = *t.shape().last().unwrap_or(&1);
    let eps = T::of(COSINE_EPS);
    for row in t.data().chunks(d) {
        if row.iter().map(|&x| x * x).sum::<T>().sqrt() <= eps {
            return Err(Error::degenerate("batch_loss", format!("zero-norm {what} row")));
        }
    }
    Ok(())
}

/// In-batch cross-entropy over cosine logits for predictions `x[B, D]`
/// and targets `y[B, D]`: every other row's target is a negative.
pub fn batch_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sx != sy {
        return Err(Error::shape("batch_loss", &[&sx, &sy]));
    }
    check_rows(g, x, "prediction")?;
    check_rows(g, y, "target")?;
    let (b, d) = (sx[0], sx[1]);
    let xr = g.reshape(x, &[b, 1, d])?;
    let yr = g.reshape(y, &[1, b, d])?;
    let logits = g.cosine(xr, yr)?;
    let lse = g.log_sum_exp(logits)?;
    let positive = g.cosine(x, y)?;
    let per_row = g.sub(lse, positive)?;
    Ok(g.mean(per_row))
}

/// Mean of per-turn batch losses.
pub fn transaction_loss<T: Real>(g: &mut Graph<T>, predictions: &[Var], targets: &[Var]) -> Result<Var> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::shape(
            "transaction_loss",
            &[&[predictions.len()], &[targets.len()]],
        ));
    }
    let losses = predictions
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let l = batch_loss(g, x, y)?;
            g.reshape(l, &[1])
        })
        .collect::<Result<Vec<_>>>()?;
    let all = g.concat(&losses, 0)?;
    Ok(g.mean(all))
}

/// Batch loss of plain row-major matrices, for evaluation and tests.
pub fn batch_loss_value(x: &[f64], y: &[f64], b: usize) -> Result<f64> {
    let d = x.len() / b.max(1);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![b, d], x.to_vec())?);
    let y = g.constant(Tensor::new(vec![b, d], y.to_vec())?);
    let l = batch_loss(&mut g, x, y)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db() -> CandidateDb {
        CandidateDb::new(vec![0, 1, 2], vec![1., 0., 0., 1., 1., 1.], 2).unwrap()
    }

    #[test]
    fn scores_identity_and_orthogonal() {
        let s = similarity_scores(&[1.0f32, 0.0], &db()).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!(matches!(
            similarity_scores(&[0.0f32, 0.0], &db()),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn cosine_is_scale_invariant() {
        assert!((cosine(&[1.0f64, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_orders_and_breaks_ties() {
        let r = rank(&[0, 1], &[0.1, 0.9]).unwrap();
        assert_eq!(r.ids, vec![1, 0]);
        let r = rank(&[3, 1, 2], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.ids, vec![1, 2, 3]);
        assert!(rank(&[0], &[f64::NAN]).is_err());
    }

    #[test]
    fn recall_examples() {
        let r = rank(&[0, 1, 2], &[0.3, 0.2, 0.1]).unwrap();
        assert_eq!(recall_at_k(std::slice::from_ref(&r), &[0], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(std::slice::from_ref(&r), &[2], 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(std::slice::from_ref(&r), &[2], 2).unwrap(), 0.0);
        assert!(recall_at_k(std::slice::from_ref(&r), &[7], 2).is_err());
        assert!(recall_at_k(&[r], &[0], 0).is_err());
    }

    #[test]
    fn single_row_batch_loss_is_exactly_zero() {
        assert_eq!(batch_loss_value(&[0.3, -0.2, 0.9], &[1.0, 0.5, 0.1], 1).unwrap(), 0.0);
    }

    #[test]
    fn two_row_batch_loss() {
        // -log(e / (e + 1))
        let l = batch_loss_value(&[1., 0., 0., 1.], &[1., 0., 0., 1.], 2).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn zero_rows_are_rejected() {
        assert!(matches!(
            batch_loss_value(&[0., 0., 0., 1.], &[1., 0., 0., 1.], 2),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn db_validation() {
        assert!(CandidateDb::new(vec![0, 0], vec![1., 1.], 1).is_err());
        assert!(CandidateDb::new(vec![0], vec![1.], 1).is_err());
    }
}
