//! Token-contribution analysis instruments.
//!
//! The contribution matrices use a simplified attention-decomposition
//! attribution, labeled "ALTI-style (simplified)" in every export: each
//! attention sublayer's output at query position t is decomposed into
//! per-key summands (attention weight times projected value) plus the
//! residual stream as self-contribution; the raw contribution of a summand is
//! the Manhattan-distance drop `max(0, |o|_1 - |o - v|_1)`; rows are
//! normalized and layers are aggregated by row-stochastic matrix product
//! (rollout), first to last.
//!
//! The module also exposes adjacent-hidden-state cosine similarity (the
//! repetition-entropy observation) and the two attenuation-factor matrices,
//! plus CSV/SVG export and an optional 2-D PCA projection of hidden states.

use thiserror::Error;

use crate::model::{
    forward_with_options, AttnDecomposition, AttnKind, Arch, ForwardOptions, ForwardTrace,
    ModelError, ModelParams,
};
use crate::objectives;
use crate::tensor::cosine_raw;

pub const ATTRIBUTION_LABEL: &str = "ALTI-style (simplified)";

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("trace does not carry attribution decompositions")]
    MissingDecompositions,
    #[error("trace has fewer than 2 positions")]
    TooShort,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

// ── Contribution matrices ────────────────────────────────────────────

/// Row-normalized per-generated-token attribution over context tokens
/// (source tokens first, then target-prefix tokens).
#[derive(Debug, Clone)]
pub struct ContributionMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ContributionMatrix {
    pub fn relabel(mut self, rows: Vec<String>, cols: Vec<String>) -> Self {
        assert_eq!(rows.len(), self.row_labels.len());
        assert_eq!(cols.len(), self.col_labels.len());
        self.row_labels = rows;
        self.col_labels = cols;
        self
    }
}

/// One row of a sublayer contribution matrix: the normalized Manhattan-drop
/// weights of (self residual, each key summand). Returns
/// `(self_weight, key_weights)`.
pub fn contribution_row(output: &[f64], residual: &[f64], summands: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    let drop_of = |part: &[f64]| {
        let without: f64 = output.iter().zip(part).map(|(o, p)| (o - p).abs()).sum();
        (l1(output) - without).max(0.0)
    };
    let self_raw = drop_of(residual);
    let key_raw: Vec<f64> = summands.iter().map(|s| drop_of(s)).collect();
    let total = self_raw + key_raw.iter().sum::<f64>();
    if total == 0.0 {
        // Nothing contributed (degenerate all-zero sublayer): attribute to self.
        return (1.0, vec![0.0; summands.len()]);
    }
    (
        self_raw / total,
        key_raw.iter().map(|r| r / total).collect(),
    )
}

/// Multiply row-stochastic matrices in application order (first applied
/// first in the slice): returns `M_k .. M_2 M_1`.
pub fn rollout(mats: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    assert!(!mats.is_empty(), "rollout of zero matrices");
    let n = mats[0].len();
    let mut acc = identity(n);
    for m in mats {
        acc = mat_product(m, &acc);
    }
    acc
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_product(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Square context matrix for one attention sublayer. Rows outside the query
/// block stay identity; query rows distribute over (self, keys) per the
/// Manhattan decomposition.
fn sublayer_matrix(
    dec: &AttnDecomposition,
    ctx: usize,
    query_base: usize,
    key_base: usize,
) -> Vec<Vec<f64>> {
    let mut m = identity(ctx);
    for q in 0..dec.queries {
        let (self_w, key_w) = contribution_row(&dec.output[q], &dec.residual[q], &dec.summands[q]);
        let row = &mut m[query_base + q];
        row.iter_mut().for_each(|v| *v = 0.0);
        row[query_base + q] = self_w;
        for (j, w) in key_w.iter().enumerate() {
            row[key_base + j] += w;
        }
    }
    m
}

/// ALTI-style (simplified) contribution matrix for a teacher-forced pass.
/// Rows: generated target tokens. Columns: source tokens, then target-prefix
/// (decoder input) tokens.
pub fn contribution_matrix(
    params: &ModelParams,
    src_tokens: &[usize],
    tgt_tokens: &[usize],
) -> Result<ContributionMatrix> {
    let opts = ForwardOptions {
        record_attribution: true,
        trainable: false,
    };
    let trace = forward_with_options(params, src_tokens, tgt_tokens, &opts)?;
    contribution_from_trace(&trace)
}

/// Same computation from an existing trace; errors if the trace was run
/// without attribution recording.
pub fn contribution_from_trace(trace: &ForwardTrace) -> Result<ContributionMatrix> {
    let decs = trace
        .attribution
        .as_ref()
        .ok_or(AttributionError::MissingDecompositions)?;
    let s_len = trace.src_tokens.len();
    let t_len = trace.tgt_tokens.len();

    // Context layout and the query index of target position t.
    let arch = decs
        .iter()
        .any(|d| d.kind == AttnKind::DecoderCross || d.kind == AttnKind::EncoderSelf)
        .then_some(Arch::EncoderDecoder)
        .unwrap_or(Arch::DecoderOnly);
    let (ctx, query_of): (usize, Box<dyn Fn(usize) -> usize>) = match arch {
        Arch::EncoderDecoder => (s_len + t_len, Box::new(move |t| s_len + t)),
        Arch::DecoderOnly => (s_len + t_len + 1, Box::new(move |t| s_len + 1 + t)),
    };

    let mats: Vec<Vec<Vec<f64>>> = decs
        .iter()
        .map(|dec| {
            let (query_base, key_base) = match (arch, dec.kind) {
                (Arch::EncoderDecoder, AttnKind::EncoderSelf) => (0, 0),
                (Arch::EncoderDecoder, AttnKind::DecoderSelf) => (s_len, s_len),
                (Arch::EncoderDecoder, AttnKind::DecoderCross) => (s_len, 0),
                (Arch::DecoderOnly, AttnKind::DecoderSelf) => (0, 0),
                (a, k) => unreachable!("sublayer {k:?} in {a:?}"),
            };
            sublayer_matrix(dec, ctx, query_base, key_base)
        })
        .collect();
    let rolled = rollout(&mats);

    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = rolled[query_of(t)].clone();
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
        rows.push(row);
    }

    let row_labels: Vec<String> = trace.tgt_tokens.iter().map(|t| format!("y{t}")).collect();
    let col_labels: Vec<String> = match arch {
        Arch::EncoderDecoder => {
            let mut labels: Vec<String> =
                trace.src_tokens.iter().map(|t| format!("s{t}")).collect();
            labels.push("<bos>".to_string());
            labels.extend(trace.tgt_tokens[..t_len - 1].iter().map(|t| format!("y{t}")));
            labels
        }
        Arch::DecoderOnly => {
            let mut labels = vec!["<bos>".to_string()];
            labels.extend(trace.src_tokens.iter().map(|t| format!("s{t}")));
            labels.push("<sep>".to_string());
            labels.extend(trace.tgt_tokens[..t_len - 1].iter().map(|t| format!("y{t}")));
            labels
        }
    };
    Ok(ContributionMatrix { row_labels, col_labels, rows })
}

// ── Adjacent hidden-state similarity ─────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdjacentSimilarity {
    /// (position t, cosine of hidden states at t and t+1), 0-based.
    pub pairs: Vec<(usize, f64)>,
    /// Mean over pairs whose tokens are equal.
    pub same_token_mean: Option<f64>,
    /// Mean over pairs whose tokens differ.
    pub diff_token_mean: Option<f64>,
}

pub fn adjacent_similarity(trace: &ForwardTrace) -> Result<AdjacentSimilarity> {
    let t_len = trace.target_len();
    if t_len < 2 {
        return Err(AttributionError::TooShort);
    }
    let hidden = trace.hidden.values();
    let d = trace.hidden.shape()[1];
    let row = |t: usize| &hidden[t * d..(t + 1) * d];
    let mut pairs = Vec::with_capacity(t_len - 1);
    let (mut same_sum, mut same_n) = (0.0, 0usize);
    let (mut diff_sum, mut diff_n) = (0.0, 0usize);
    for t in 0..t_len - 1 {
        let cos = cosine_raw(row(t), row(t + 1));
        pairs.push((t, cos));
        if trace.tgt_tokens[t] == trace.tgt_tokens[t + 1] {
            same_sum += cos;
            same_n += 1;
        } else {
            diff_sum += cos;
            diff_n += 1;
        }
    }
    Ok(AdjacentSimilarity {
        pairs,
        same_token_mean: (same_n > 0).then(|| same_sum / same_n as f64),
        diff_token_mean: (diff_n > 0).then(|| diff_sum / diff_n as f64),
    })
}

// ── Attenuation-factor matrices ──────────────────────────────────────

/// `(similarity, decay)` matrices over target positions: similarity is the
/// pairwise attention cosine, decay is `exp(-|i-j|/T)`. Both are symmetric
/// with a unit diagonal.
pub fn attenuation_matrices(trace: &ForwardTrace, temperature: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if temperature <= 0.0 {
        return Err(AttributionError::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = trace.atten.len();
    let atten: Vec<Vec<f64>> = trace.atten.iter().map(|a| a.values()).collect();
    let mut sim = vec![vec![1.0; n]; n];
    let mut decay = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = objectives::alpha_s(&atten[i], &atten[j])
                .map_err(|e| AttributionError::Invalid(e.to_string()))?;
            sim[i][j] = s;
            sim[j][i] = s;
            let d = (-((j - i) as f64) / temperature).exp();
            decay[i][j] = d;
            decay[j][i] = d;
        }
    }
    Ok((sim, decay))
}

// ── PCA projection ───────────────────────────────────────────────────

/// 2-D PCA projection of row vectors (power iteration with deflation,
/// deterministic start). Substitutes for stochastic embedding projections.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    if n < 2 || d < 1 {
        return vec![(0.0, 0.0); n];
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += row[i] * row[j] / (n - 1) as f64;
            }
        }
    }
    let power = |cov: &[Vec<f64>]| -> (Vec<f64>, f64) {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    next[i] += cov[i][j] * v[j];
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return (v, 0.0);
            }
            next.iter_mut().for_each(|x| *x /= norm);
            lambda = norm;
            v = next;
        }
        (v, lambda)
    };
    let (v1, l1) = power(&cov);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i][j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, _) = power(&deflated);
    centered
        .iter()
        .map(|row| {
            let x: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&v2).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}

// ── Exports ──────────────────────────────────────────────────────────

/// CSV with header labels: first column holds row labels.
pub fn matrix_csv(title: &str, row_labels: &[String], col_labels: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    out.push_str(title);
    for c in col_labels {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (label, row) in row_labels.iter().zip(rows) {
        out.push_str(label);
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Standalone SVG heatmap (no external assets): row-major color map with
/// labels on both axes.
pub fn svg_heatmap(title: &str, row_labels: &[String], col_labels: &[String], rows: &[Vec<f64>]) -> String {
    let cell = 26.0;
    let margin_left = 90.0;
    let margin_top = 60.0;
    let n_rows = rows.len();
    let n_cols = col_labels.len();
    let width = margin_left + cell * n_cols as f64 + 20.0;
    let height = margin_top + cell * n_rows as f64 + 20.0;
    let max = rows
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{margin_left}\" y=\"20\" font-family=\"monospace\" font-size=\"13\">{}</text>\n",
        xml_escape(title)
    ));
    for (j, label) in col_labels.iter().enumerate() {
        let x = margin_left + cell * (j as f64 + 0.5);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"9\" \
             text-anchor=\"start\" transform=\"rotate(-60 {x:.1} {:.1})\">{}</text>\n",
            margin_top - 6.0,
            margin_top - 6.0,
            xml_escape(label)
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        let y = margin_top + cell * i as f64;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"9\" \
             text-anchor=\"end\">{}</text>\n",
            margin_left - 6.0,
            y + cell * 0.65,
            xml_escape(&row_labels[i])
        ));
        for (j, v) in row.iter().enumerate() {
            let x = margin_left + cell * j as f64;
            let intensity = (v / max).clamp(0.0, 1.0);
            let shade = (255.0 - intensity * 200.0) as u8;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({shade},{shade},255)\" stroke=\"white\" stroke-width=\"0.5\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS_ID;
    use crate::model::{forward_teacher_forced, init_params, AttnSource, ModelConfig};
    use rand::RngCore;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(arch: Arch, seed: u64) -> ModelConfig {
        ModelConfig {
            arch,
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            max_len: 24,
            tie_output_embedding: true,
            seed,
            attn_source: AttnSource::FinalLayer,
        }
    }

    #[test]
    fn one_hot_attention_zero_residual_gives_permutation_row() {
        // Query attends entirely to key 1; no residual.
        let summands = vec![
            vec![0.0, 0.0, 0.0],
            vec![0.4, -0.2, 0.9],
            vec![0.0, 0.0, 0.0],
        ];
        let output = summands[1].clone();
        let residual = vec![0.0, 0.0, 0.0];
        let (self_w, keys) = contribution_row(&output, &residual, &summands);
        assert_eq!(self_w, 0.0);
        assert_eq!(keys, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn contribution_row_matches_hand_computation() {
        // 3-key example with 2-d vectors, worked by hand:
        //   o = [1.0, 0.5], residual r = [0.5, 0.0],
        //   v1 = [0.3, 0.3], v2 = [0.2, 0.2]
        // |o|_1 = 1.5
        // drop(r)  = 1.5 - (|0.5| + |0.5|) = 0.5
        // drop(v1) = 1.5 - (|0.7| + |0.2|) = 0.6
        // drop(v2) = 1.5 - (|0.8| + |0.3|) = 0.4
        // total 1.5 -> weights (1/3, 0.4, 4/15)
        let output = vec![1.0, 0.5];
        let residual = vec![0.5, 0.0];
        let summands = vec![vec![0.3, 0.3], vec![0.2, 0.2]];
        let (self_w, keys) = contribution_row(&output, &residual, &summands);
        assert!((self_w - 0.5 / 1.5).abs() < 1e-12);
        assert!((keys[0] - 0.6 / 1.5).abs() < 1e-12);
        assert!((keys[1] - 0.4 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn negative_drops_clamp_to_zero() {
        // A summand pointing away from the output can only lower |o - v|
        // below |o| or not; drops are clamped at zero.
        let output = vec![1.0, 0.0];
        let residual = vec![0.0, 0.0];
        let summands = vec![vec![-2.0, 0.0]];
        let (self_w, keys) = contribution_row(&output, &residual, &summands);
        assert_eq!(keys[0], 0.0);
        assert_eq!(self_w, 1.0); // degenerate row attributes to self
    }

    #[test]
    fn contribution_rows_are_stochastic_both_archs() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            for seed in 0..5 {
                let params = init_params(&cfg(arch, seed)).unwrap();
                let m = contribution_matrix(&params, &[5, 6, 7], &[8, 9, 10, EOS_ID]).unwrap();
                assert_eq!(m.rows.len(), 4);
                for row in &m.rows {
                    assert_eq!(row.len(), m.col_labels.len());
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
                    assert!(row.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn contribution_requires_attribution_recording() {
        let params = init_params(&cfg(Arch::EncoderDecoder, 1)).unwrap();
        let trace = forward_teacher_forced(&params, &[5, 6], &[7, EOS_ID]).unwrap();
        assert!(matches!(
            contribution_from_trace(&trace),
            Err(AttributionError::MissingDecompositions)
        ));
    }

    #[test]
    fn rollout_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut random_stochastic = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..n)
                        .map(|_| ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) + 1e-3)
                        .collect();
                    let sum: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / sum).collect()
                })
                .collect()
        };
        let (a, b, c) = (random_stochastic(6), random_stochastic(6), random_stochastic(6));
        // rollout applies first-to-last: result = C (B A).
        let ab_then_c = rollout(&[a.clone(), b.clone(), c.clone()]);
        let ba = mat_product(&b, &a);
        let full = mat_product(&c, &ba);
        for i in 0..6 {
            for j in 0..6 {
                assert!((ab_then_c[i][j] - full[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adjacent_similarity_means_split_by_token_equality() {
        let params = init_params(&cfg(Arch::EncoderDecoder, 2)).unwrap();
        let trace = forward_teacher_forced(&params, &[5, 6], &[7, 7, 8, EOS_ID]).unwrap();
        let sim = adjacent_similarity(&trace).unwrap();
        assert_eq!(sim.pairs.len(), 3);
        assert!(sim.same_token_mean.is_some()); // pair (7,7)
        assert!(sim.diff_token_mean.is_some());
        for (_, cos) in &sim.pairs {
            assert!((-1.0..=1.0).contains(cos));
        }
        // Identical hidden states give cosine 1: feed the same token twice
        // at the same... positions differ, so just check the bound here; the
        // directional check lives in the acceptance suite.
    }

    #[test]
    fn adjacent_similarity_requires_two_positions() {
        let params = init_params(&cfg(Arch::EncoderDecoder, 2)).unwrap();
        let trace = forward_teacher_forced(&params, &[5, 6], &[7]).unwrap();
        assert!(matches!(adjacent_similarity(&trace), Err(AttributionError::TooShort)));
    }

    #[test]
    fn attenuation_matrices_contract() {
        let params = init_params(&cfg(Arch::EncoderDecoder, 3)).unwrap();
        let trace = forward_teacher_forced(&params, &[5, 6, 7], &[8, 9, 10, 11, 5, 6]).unwrap();
        let temp = 4.0;
        let (sim, decay) = attenuation_matrices(&trace, temp).unwrap();
        let n = 6;
        for i in 0..n {
            assert_eq!(sim[i][i], 1.0);
            assert_eq!(decay[i][i], 1.0);
            for j in 0..n {
                assert_eq!(sim[i][j], sim[j][i]);
                assert_eq!(decay[i][j], decay[j][i]);
                let expect = (-((i as f64 - j as f64).abs()) / temp).exp();
                assert!((decay[i][j] - expect).abs() < 1e-12);
            }
        }
        // Strictly decreasing with distance, and e^{-1} at gap = T.
        assert!(decay[0][1] > decay[0][2]);
        assert!((decay[0][4] - (-1.0f64).exp()).abs() < 1e-12);
        assert!(attenuation_matrices(&trace, 0.0).is_err());
    }

    #[test]
    fn pca_projects_along_dominant_axis() {
        // Points on a line in 5-d: first component carries all variance.
        let points: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, 2.0 * i as f64, 0.0, 0.0, 0.0])
            .collect();
        let proj = pca_2d(&points);
        assert_eq!(proj.len(), 10);
        // Monotone along the first principal component.
        let xs: Vec<f64> = proj.iter().map(|p| p.0).collect();
        let increasing = xs.windows(2).all(|w| w[1] > w[0]);
        let decreasing = xs.windows(2).all(|w| w[1] < w[0]);
        assert!(increasing || decreasing, "{xs:?}");
    }

    #[test]
    fn exports_are_self_contained() {
        let rows = vec![vec![0.25, 0.75], vec![0.5, 0.5]];
        let labels = vec!["r0".to_string(), "r1".to_string()];
        let cols = vec!["c0".to_string(), "c1".to_string()];
        let csv = matrix_csv(ATTRIBUTION_LABEL, &labels, &cols, &rows);
        assert!(csv.starts_with("ALTI-style (simplified),c0,c1\n"));
        assert!(csv.contains("r0,0.250000,0.750000"));
        let svg = svg_heatmap("test", &labels, &cols, &rows);
        assert!(svg.starts_with("<svg xmlns"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 4);
    }
}
