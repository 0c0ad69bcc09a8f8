//! Semantic alignment: a symmetric InfoNCE objective over the pooled output
//! embeddings of the two diffusion branches, and a cosine regularizer pulling
//! hook-depth hidden states toward frozen teacher features.
//!
//! The teacher is the attribute oracle: identical indicator bases for pixels
//! and captions, so matched pairs have cosine exactly 1.

use serde::{Deserialize, Serialize};

use crate::datagen::{attribute_indicator, oracle_parse, parse_caption, ATTRIBUTE_DIM};
use crate::error::{Error, Result};
use crate::instrument;
use crate::numerics::{BoundParams, Graph, Scalar, Tensor, Var};
use crate::tokenization::Image;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub d_sem: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { temperature: 0.07, d_sem: ATTRIBUTE_DIM }
    }
}

/// Frozen semantic embeddings of a target image and its caption. A zero
/// vector (with the matching flag false) marks an unparseable side; such
/// terms contribute nothing to the intrinsic loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures<T> {
    pub h_image: Tensor<T>,
    pub h_text: Tensor<T>,
    pub image_ok: bool,
    pub text_ok: bool,
}

fn normalized_indicator<T: Scalar>(v: [f64; ATTRIBUTE_DIM]) -> (Tensor<T>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (Tensor::zeros(vec![ATTRIBUTE_DIM]), false);
    }
    (Tensor::from_fn(vec![ATTRIBUTE_DIM], |i| T::from_f64(v[i] / norm)), true)
}

/// Deterministic teacher: attribute indicators from the oracle parser,
/// L2-normalized, same basis for both modalities.
pub fn teacher_features<T: Scalar>(image: &Image, caption: &str) -> TeacherFeatures<T> {
    instrument::count_teacher();
    let parsed = oracle_parse(image);
    let (h_image, image_ok) = normalized_indicator(attribute_indicator(&parsed.spec.objects));
    let (h_text, text_ok) = normalized_indicator(attribute_indicator(&parse_caption(caption)));
    TeacherFeatures { h_image, h_text, image_ok, text_ok }
}

// ---- cross-modal contrastive loss (Eq.-3 style, symmetric) -----------------

/// Symmetric InfoNCE on the graph. `i_o` and `t_o` are `[N, D]` with
/// unit-normalized rows; returns the average of the image-to-text and
/// text-to-image directions.
pub fn contrastive_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    i_o: Var,
    t_o: Var,
    temperature: f64,
) -> Result<Var> {
    let (n, _) = g.value(i_o).dims2()?;
    if g.value(t_o).shape() != g.value(i_o).shape() {
        return Err(Error::shape("contrastive", "embedding shape mismatch".to_string()));
    }
    let t_t = g.transpose(t_o)?;
    let sims = g.matmul(i_o, t_t)?;
    let scaled = g.scale(sims, T::from_f64(1.0 / temperature))?;
    let diag_ids: Vec<usize> = (0..n).collect();
    // image -> text: softmax over each row
    let lp_rows = g.log_softmax(scaled)?;
    let diag_i2t = g.gather_rows(lp_rows, &diag_ids)?;
    let i2t = g.mean_all(diag_i2t)?;
    // text -> image: softmax over each column
    let scaled_t = g.transpose(scaled)?;
    let lp_cols = g.log_softmax(scaled_t)?;
    let diag_t2i = g.gather_rows(lp_cols, &diag_ids)?;
    let t2i = g.mean_all(diag_t2i)?;
    let sum = g.add(i2t, t2i)?;
    g.scale(sum, T::from_f64(-0.5))
}

/// Reference implementation on plain tensors (used by tests and analytics).
pub fn contrastive_loss_value(i_o: &Tensor<f64>, t_o: &Tensor<f64>, temperature: f64) -> f64 {
    let (n, d) = i_o.dims2().expect("2-D embeddings");
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rows = vec![vec![0.0; n]; n];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell =
                sim(&i_o.data()[i * d..(i + 1) * d], &t_o.data()[j * d..(j + 1) * d]) / temperature;
        }
    }
    let logsumexp = |xs: &[f64]| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for (i, row) in rows.iter().enumerate() {
        i2t -= row[i] - logsumexp(row);
        let col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
        t2i -= row[i] - logsumexp(&col);
    }
    0.5 * (i2t + t2i) / n as f64
}

// ---- intrinsic-modal alignment (Eq.-4 style) --------------------------------

/// Apply a two-layer projection head `M` (d -> 2d -> d_sem). Parameter names
/// are `{prefix}.fc1.w`, `{prefix}.fc1.b`, `{prefix}.fc2.w`, `{prefix}.fc2.b`.
pub fn projection_head_graph<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    instrument::count_projection_head();
    let w1 = bound.var(&format!("{prefix}.fc1.w"))?;
    let b1 = bound.var(&format!("{prefix}.fc1.b"))?;
    let w2 = bound.var(&format!("{prefix}.fc2.w"))?;
    let b2 = bound.var(&format!("{prefix}.fc2.b"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_bias(out, b2)
}

/// cos(teacher, M(hook_mean)) as a graph scalar, or `None` when the teacher
/// vector is zero (unparseable target); zero-norm projections are a
/// checked-mode failure inside `cosine_rows`.
pub fn intrinsic_cos_term<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    head_prefix: &str,
    hook_mean: Var,
    teacher: &Tensor<T>,
    teacher_ok: bool,
) -> Result<Option<Var>> {
    if !teacher_ok {
        return Ok(None);
    }
    let d = g.value(hook_mean).numel();
    let x = g.reshape(hook_mean, vec![1, d])?;
    let projected = projection_head_graph(g, bound, head_prefix, x)?;
    let t = g.constant(teacher.reshaped(vec![1, teacher.numel()])?);
    let cos = g.cosine_rows(projected, t)?;
    Ok(Some(g.reshape(cos, vec![1])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        all_single_object_specs, all_two_object_specs, caption_scene, render_scene,
    };
    use crate::numerics::{ParameterStore, RngState};

    #[test]
    fn matched_pairs_have_identical_teacher_features() {
        // exhaustive over the full synthetic split
        let mut rng = RngState::new(21);
        let mut specs = all_single_object_specs();
        specs.extend(all_two_object_specs());
        for spec in specs.iter() {
            let img = render_scene(spec, 16).unwrap();
            let caption = caption_scene(spec, &mut rng);
            let tf = teacher_features::<f64>(&img, &caption);
            assert!(tf.image_ok && tf.text_ok);
            assert_eq!(tf.h_image, tf.h_text, "spec {spec:?} caption `{caption}`");
            let n: f64 = tf.h_image.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_pair_has_cosine_below_one() {
        use crate::datagen::{Background, Color, Position, SceneObject, SceneSpec, Shape};
        let spec = SceneSpec::new(
            vec![SceneObject { shape: Shape::Circle, color: Color::Red, position: Position::Left }],
            Background::Black,
        );
        let img = render_scene(&spec, 16).unwrap();
        let tf = teacher_features::<f64>(&img, "a blue square on the left");
        let cos: f64 = tf
            .h_image
            .data()
            .iter()
            .zip(tf.h_text.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!(cos < 1.0 - 1e-6, "cos {cos}");
    }

    #[test]
    fn unparseable_image_gives_flagged_zero_vector() {
        let mut rng = RngState::new(33);
        let mut img = Image::new(16, 16);
        for v in img.data.iter_mut() {
            *v = (rng.uniform_f64() * 2.0 - 1.0) as f32;
        }
        let tf = teacher_features::<f64>(&img, "a red circle on the left");
        if !tf.image_ok {
            assert!(tf.h_image.data().iter().all(|&x| x == 0.0));
        }
        assert!(tf.text_ok);
    }

    fn stack(rows: &[Vec<f64>]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    fn normalize(v: &mut [f64]) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v {
            *x /= n;
        }
    }

    #[test]
    fn all_equal_similarities_give_ln_n() {
        for &n in &[2usize, 4, 16] {
            // identical unit rows: every similarity is exactly 1
            let mut row = vec![0.3, -0.4, 0.5, 0.2];
            normalize(&mut row);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| row.clone()).collect();
            let e = stack(&rows);
            let loss = contrastive_loss_value(&e, &e, 0.07);
            assert!((loss - (n as f64).ln()).abs() < 1e-9, "n={n} loss={loss}");
        }
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let mut row = vec![1.0, 2.0, -1.0];
        normalize(&mut row);
        let e = stack(&[row]);
        assert!(contrastive_loss_value(&e, &e, 0.07).abs() < 1e-12);
    }

    #[test]
    fn two_pair_extreme_case_matches_hand_value() {
        // matched sim 1, unmatched sim -1, tau 0.07:
        // loss = ln(1 + e^{-2/0.07}) ≈ 3.8e-13
        let i = stack(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let t = stack(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let loss = contrastive_loss_value(&i, &t, 0.07);
        let want = (1.0 + (-2.0f64 / 0.07).exp()).ln();
        assert!((loss - want).abs() < 1e-15, "loss {loss} want {want}");
        assert!(loss < 1e-12);
    }

    #[test]
    fn graph_contrastive_matches_reference() {
        let mut rng = RngState::new(55);
        let n = 5;
        let d = 8;
        let make = |rng: &mut RngState| {
            let mut rows = Vec::new();
            for _ in 0..n {
                let mut r: Vec<f64> = (0..d).map(|_| rng.normal_f64()).collect();
                normalize(&mut r);
                rows.push(r);
            }
            stack(&rows)
        };
        let i = make(&mut rng);
        let t = make(&mut rng);
        let want = contrastive_loss_value(&i, &t, 0.07);
        let mut g = Graph::new();
        let iv = g.constant(i);
        let tv = g.constant(t);
        let loss = contrastive_loss_graph(&mut g, iv, tv, 0.07).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_decreases_as_matched_similarity_rises() {
        // rotate matched pairs toward each other while negatives stay fixed
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let angle = 1.0 - k as f64 * 0.1;
            let i = stack(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
            let t = stack(&[
                vec![angle.cos(), angle.sin()],
                vec![angle.sin(), angle.cos()],
            ]);
            let loss = contrastive_loss_value(&i, &t, 0.07);
            assert!(loss < prev, "k={k} loss={loss} prev={prev}");
            prev = loss;
        }
    }

    #[test]
    fn contrastive_invariant_to_common_prenormalization_rescale() {
        let mut rng = RngState::new(77);
        let n = 4;
        let d = 6;
        let raw: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.normal_f64()).collect()).collect();
        let traw: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.normal_f64()).collect()).collect();
        let norm_stack = |rows: &[Vec<f64>], scale: f64| {
            let scaled: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut v: Vec<f64> = r.iter().map(|x| x * scale).collect();
                    normalize(&mut v);
                    v
                })
                .collect();
            stack(&scaled)
        };
        let a = contrastive_loss_value(&norm_stack(&raw, 1.0), &norm_stack(&traw, 1.0), 0.07);
        let b = contrastive_loss_value(&norm_stack(&raw, 7.3), &norm_stack(&traw, 7.3), 0.07);
        assert!((a - b).abs() < 1e-12);
    }

    /// Heads with zero weights and a chosen fc2 bias output that bias for any
    /// input, which pins the intrinsic loss exactly.
    fn constant_head(params: &mut ParameterStore<f64>, prefix: &str, d: usize, out: &[f64]) {
        params.insert(format!("{prefix}.fc1.w"), Tensor::zeros(vec![d, 2 * d]));
        params.insert(format!("{prefix}.fc1.b"), Tensor::zeros(vec![2 * d]));
        params.insert(format!("{prefix}.fc2.w"), Tensor::zeros(vec![2 * d, out.len()]));
        params.insert(
            format!("{prefix}.fc2.b"),
            Tensor::new(vec![out.len()], out.to_vec()).unwrap(),
        );
    }

    fn intrinsic_value(m_img_out: &[f64], m_txt_out: &[f64], h_i: &[f64], h_t: &[f64]) -> f64 {
        let d = 4;
        let mut params = ParameterStore::new();
        constant_head(&mut params, "align.img", d, m_img_out);
        constant_head(&mut params, "align.txt", d, m_txt_out);
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params);
        let hook_i = g.constant(Tensor::zeros(vec![d]));
        let hook_t = g.constant(Tensor::zeros(vec![d]));
        let hi = Tensor::new(vec![h_i.len()], h_i.to_vec()).unwrap();
        let ht = Tensor::new(vec![h_t.len()], h_t.to_vec()).unwrap();
        let a = intrinsic_cos_term(&mut g, &bound, "align.img", hook_i, &hi, true)
            .unwrap()
            .unwrap();
        let b = intrinsic_cos_term(&mut g, &bound, "align.txt", hook_t, &ht, true)
            .unwrap()
            .unwrap();
        let sum = g.add(a, b).unwrap();
        let loss = g.scale(sum, -1.0).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn intrinsic_range_endpoints() {
        let h_i = [1.0, 0.0, 0.0];
        let h_t = [0.0, 1.0, 0.0];
        // aligned: M == teacher both terms -> -2
        let aligned = intrinsic_value(&h_i, &h_t, &h_i, &h_t);
        assert!((aligned + 2.0).abs() < 1e-9, "{aligned}");
        // orthogonal -> 0
        let ortho = intrinsic_value(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0], &h_i, &h_t);
        assert!(ortho.abs() < 1e-9, "{ortho}");
        // anti-aligned -> +2
        let anti = intrinsic_value(&[-1.0, 0.0, 0.0], &[0.0, -1.0, 0.0], &h_i, &h_t);
        assert!((anti - 2.0).abs() < 1e-9, "{anti}");
    }

    #[test]
    fn zero_teacher_term_is_skipped() {
        let mut params = ParameterStore::new();
        constant_head(&mut params, "align.img", 4, &[1.0, 0.0]);
        let mut g = Graph::<f64>::new();
        let bound = BoundParams::bind(&mut g, &params);
        let hook = g.constant(Tensor::zeros(vec![4]));
        let zero_teacher = Tensor::zeros(vec![2]);
        let term =
            intrinsic_cos_term(&mut g, &bound, "align.img", hook, &zero_teacher, false).unwrap();
        assert!(term.is_none());
    }
}
