//! Search database construction, patch and case distances, ranking and
//! explanation payloads.

mod explain;
mod store;

pub use explain::{export_explanation, parse_heatmap, render_heatmap, Heatmap};
pub use store::{database_from_bytes, database_to_bytes, load_database, save_database, DATABASE_FORMAT_VERSION};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Case, IhcPattern, ScaleSet, Subtype};
use crate::mil::{multiscale_attention, top_count, top_n_by_weight, validate_fraction};
use crate::model::ScaleModels;
use crate::rng::substream;
use crate::{Error, Result};

/// How stored patches are chosen from the sampled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSelection {
    /// Top `ceil(M·Q)` by attention, case-wide.
    Attention,
    /// `ceil(M·Q)` patches drawn uniformly; attention is not evaluated.
    Uniform,
}

/// Which network output is stored as the patch embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    /// `f_met(f_enc(x))`.
    Metric,
    /// `f_enc(x)` only.
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Patches sampled per case.
    pub q_test: usize,
    pub m_fraction: f64,
    pub selection: PatchSelection,
    pub embed: EmbedMode,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            q_test: 1000,
            m_fraction: 0.1,
            selection: PatchSelection::Attention,
            embed: EmbedMode::Metric,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_test == 0 {
            return Err(Error::Config("q_test must be positive".into()));
        }
        validate_fraction(self.m_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPatch {
    pub patch_id: u32,
    pub position: u32,
    pub attention: f64,
    /// One embedding per active scale, in scale order.
    #[serde(skip)]
    pub embeddings: Vec<Vec<f64>>,
}

impl StoredPatch {
    pub fn new(patch_id: u32, embeddings: Vec<Vec<f64>>) -> Self {
        Self {
            patch_id,
            position: patch_id,
            attention: 0.0,
            embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseEntry {
    pub case_id: String,
    pub subtype: Subtype,
    pub ihc: Option<IhcPattern>,
    /// Ordered by descending attention, then ascending patch id.
    pub patches: Vec<StoredPatch>,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchDatabase {
    pub fingerprint: String,
    pub scales: ScaleSet,
    pub embed_dim: usize,
    pub extract: ExtractConfig,
    pub k: usize,
    pub l: usize,
    pub grid_cols: u32,
    pub entries: Vec<DatabaseEntry>,
}

/// Patches sampled for extraction (indices into `Case::patches`, ascending)
/// and their attention weights over the whole sample, averaged over scales.
/// Uniform selection skips attention and reports zero weights.
pub fn sampled_attention(
    models: &ScaleModels,
    case: &Case,
    cfg: &ExtractConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>, crate::rng::Rng)> {
    cfg.validate()?;
    if case.patches.is_empty() {
        return Err(Error::RetrievalInput(format!("case {} has no patches", case.case_id)));
    }
    let mut rng = substream(seed, &format!("extract/{}", case.case_id));
    let n = case.patches.len();
    let mut sampled = index::sample(&mut rng, n, cfg.q_test.min(n)).into_vec();
    sampled.sort_unstable();
    if cfg.selection == PatchSelection::Uniform {
        let zeros = vec![0.0; sampled.len()];
        return Ok((sampled, zeros, rng));
    }
    let mut combined: Option<Vec<f64>> = None;
    for m in models.models() {
        let xs = sampled
            .iter()
            .map(|&i| case.patches[i].features(m.scale))
            .collect::<Result<Vec<_>>>()?;
        let w = m.attention_weights(&xs)?;
        combined = Some(match combined {
            None => w,
            Some(prev) => multiscale_attention(&prev, &w)?,
        });
    }
    let w = combined.ok_or_else(|| Error::Config("no scale models".into()))?;
    Ok((sampled, w, rng))
}

/// Samples `min(Q, n)` patches with the case's own substream, weighs them
/// (mean over scales in multi-scale mode), keeps the top `ceil(M·Q)` (or all
/// of them when fewer were sampled) and embeds them.
pub fn extract_case(
    models: &ScaleModels,
    case: &Case,
    cfg: &ExtractConfig,
    grid_cols: u32,
    seed: u64,
) -> Result<DatabaseEntry> {
    let (sampled, weights, mut rng) = sampled_attention(models, case, cfg, seed)?;
    let ids: Vec<u32> = sampled.iter().map(|&i| case.patches[i].patch_id).collect();
    let count = top_count(cfg.m_fraction, cfg.q_test).min(sampled.len());
    let keep = match cfg.selection {
        PatchSelection::Attention => top_n_by_weight(&weights, &ids, count),
        PatchSelection::Uniform => {
            let mut keep = index::sample(&mut rng, sampled.len(), count).into_vec();
            keep.sort_unstable_by_key(|&k| ids[k]);
            keep
        }
    };

    let mut patches = Vec::with_capacity(keep.len());
    for &k in &keep {
        let p = &case.patches[sampled[k]];
        let embeddings = models
            .models()
            .iter()
            .map(|m| {
                let x = p.features(m.scale)?;
                match cfg.embed {
                    EmbedMode::Metric => m.embed(x),
                    EmbedMode::Encoder => m.encode(x),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        patches.push(StoredPatch {
            patch_id: p.patch_id,
            position: p.position,
            attention: weights[k],
            embeddings,
        });
    }
    let positions: Vec<u32> = sampled.iter().map(|&i| case.patches[i].position).collect();
    Ok(DatabaseEntry {
        case_id: case.case_id.clone(),
        subtype: case.subtype,
        ihc: case.ihc.clone(),
        patches,
        heatmap: Heatmap::from_weights(&positions, &weights, grid_cols),
    })
}

fn embed_dim_for(models: &ScaleModels, cfg: &ExtractConfig) -> usize {
    let m = &models.models()[0];
    match cfg.embed {
        EmbedMode::Metric => m.embed_dim(),
        EmbedMode::Encoder => m.encoder.output_dim(),
    }
}

/// Extracts every case into a database tagged with the models' fingerprint.
pub fn build_database(
    models: &ScaleModels,
    cases: &[&Case],
    cfg: &ExtractConfig,
    grid_cols: u32,
    seed: u64,
) -> Result<SearchDatabase> {
    let first = cases.first().ok_or_else(|| Error::RetrievalInput("no database cases".into()))?;
    let feature_dim = models.models()[0].feature_dim();
    for c in cases {
        for m in models.models() {
            let got = c.patches.first().map(|p| p.features(m.scale)).transpose()?.map_or(0, <[f64]>::len);
            if got != feature_dim {
                return Err(Error::Incompatible(format!(
                    "case {} has {got}-dim features at scale {}, models expect {feature_dim}",
                    c.case_id, m.scale
                )));
            }
        }
    }
    let entries = cases
        .par_iter()
        .map(|c| extract_case(models, c, cfg, grid_cols, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SearchDatabase {
        fingerprint: models.fingerprint(),
        scales: models.scales,
        embed_dim: embed_dim_for(models, cfg),
        extract: *cfg,
        k: first.subtype.k,
        l: first.ihc.as_ref().map_or(0, IhcPattern::len),
        grid_cols,
        entries,
    })
}

/// `‖z_i − z_j‖₂`.
pub fn patch_distance(z_i: &[f64], z_j: &[f64]) -> Result<f64> {
    if z_i.len() != z_j.len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", z_i.len(), z_j.len())));
    }
    Ok(euclid(z_i, z_j))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖zH_i − zH_j‖₂ + ‖zL_i − zL_j‖₂`.
pub fn multiscale_patch_distance(zh_i: &[f64], zh_j: &[f64], zl_i: &[f64], zl_j: &[f64]) -> Result<f64> {
    Ok(patch_distance(zh_i, zh_j)? + patch_distance(zl_i, zl_j)?)
}

/// Sum of per-scale distances between two stored patches.
pub fn stored_distance(a: &StoredPatch, b: &StoredPatch) -> Result<f64> {
    if a.embeddings.len() != b.embeddings.len() {
        return Err(Error::Alignment(format!(
            "{} scales vs {} scales",
            a.embeddings.len(),
            b.embeddings.len()
        )));
    }
    a.embeddings
        .iter()
        .zip(&b.embeddings)
        .map(|(x, y)| patch_distance(x, y))
        .sum()
}

/// Index and distance of the database patch closest to `q`.
pub fn nearest(db: &[StoredPatch], q: &StoredPatch) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (i, p) in db.iter().enumerate() {
        let d = stored_distance(p, q)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    if db.is_empty() {
        return Err(Error::RetrievalInput("empty database-side HA set".into()));
    }
    Ok(best)
}

/// `D(n, m) = Σ_{j ∈ query} min_{i ∈ db} d(z_i, z_j)`: summed over the query
/// side, minimised over the database side.
pub fn case_distance(db: &[StoredPatch], query: &[StoredPatch]) -> Result<f64> {
    if db.is_empty() || query.is_empty() {
        return Err(Error::RetrievalInput("case distance needs nonempty HA sets".into()));
    }
    query.iter().map(|q| nearest(db, q).map(|(_, d)| d)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub query_patch_id: u32,
    pub db_patch_id: u32,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCase {
    pub case_id: String,
    pub distance: f64,
    pub matches: Vec<PatchMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Every other database case, ascending in distance.
    pub ranking: Vec<(String, f64)>,
    /// The first `k` of `ranking` with matched patch pairs.
    pub top: Vec<RankedCase>,
}

pub const EXPLAINED_PATCHES: usize = 5;

/// Ranks every database case other than the query by `D`, ties by case id.
pub fn retrieve(db: &SearchDatabase, query: &DatabaseEntry, k: usize) -> Result<RetrievalResult> {
    if query.patches.is_empty() {
        return Err(Error::RetrievalInput(format!("query {} has no HA patches", query.case_id)));
    }
    if query.patches.iter().any(|p| {
        p.embeddings.len() != db.scales.scales().len() || p.embeddings.iter().any(|z| z.len() != db.embed_dim)
    }) {
        return Err(Error::Incompatible("query embeddings do not match the database".into()));
    }
    let mut ranking = db
        .entries
        .par_iter()
        .filter(|e| e.case_id != query.case_id)
        .map(|e| case_distance(&e.patches, &query.patches).map(|d| (e.case_id.clone(), d)))
        .collect::<Result<Vec<_>>>()?;
    if ranking.is_empty() {
        return Err(Error::RetrievalInput("database has no cases besides the query".into()));
    }
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let explained = &query.patches[..EXPLAINED_PATCHES.min(query.patches.len())];
    let top = ranking
        .iter()
        .take(k)
        .map(|(id, d)| {
            let entry = db.entries.iter().find(|e| &e.case_id == id).expect("ranked id comes from db");
            let matches = explained
                .iter()
                .map(|q| {
                    let (i, dist) = nearest(&entry.patches, q)?;
                    Ok(PatchMatch {
                        query_patch_id: q.patch_id,
                        db_patch_id: entry.patches[i].patch_id,
                        distance: dist,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RankedCase {
                case_id: id.clone(),
                distance: *d,
                matches,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalResult {
        query_id: query.case_id.clone(),
        ranking,
        top,
    })
}

/// Extracts `case` with the database's settings and retrieves against it,
/// refusing models whose fingerprint differs from the database's.
pub fn query_case(
    db: &SearchDatabase,
    models: &ScaleModels,
    case: &Case,
    k: usize,
    seed: u64,
) -> Result<(DatabaseEntry, RetrievalResult)> {
    let fp = models.fingerprint();
    if fp != db.fingerprint {
        return Err(Error::Incompatible(format!(
            "model fingerprint {fp} does not match database fingerprint {}",
            db.fingerprint
        )));
    }
    if models.scales != db.scales {
        return Err(Error::Incompatible(format!("models cover {} but database covers {}", models.scales, db.scales)));
    }
    let entry = extract_case(models, case, &db.extract, db.grid_cols, seed)?;
    let result = retrieve(db, &entry, k)?;
    Ok((entry, result))
}
