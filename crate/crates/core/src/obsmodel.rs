//! Observation function of the filter: a two-tower contrastive model with
//! low-rank adapters, observed through the diagonal of its cosine-similarity
//! matrix.
//!
//! Each tower embeds a feature row `x` as `x·(W + A·B)` where `W` is a frozen
//! `d_in × d_embed` projection and `A` (`d_in × r`), `B` (`r × d_embed`) are the
//! trainable adapter factors. Embeddings are normalized after the adapter is
//! added. The parameter vector is laid out as
//! `[A_image, B_image, A_text, B_text]`, each factor flattened row-major.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dims, invalid, Error, Result};

/// Standard deviation of the Gaussian used for the `A` factors at init.
pub const ADAPTER_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Id,
    Ood,
}

/// `m` paired feature rows with labels and an ID/OOD flag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    image_feats: DMatrix<f64>,
    text_feats: DMatrix<f64>,
    labels: Vec<usize>,
    provenance: Vec<Provenance>,
}

impl Minibatch {
    pub fn new(
        image_feats: DMatrix<f64>,
        text_feats: DMatrix<f64>,
        labels: Vec<usize>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let m = image_feats.nrows();
        if m == 0 {
            return Err(invalid("minibatch must contain at least one pair"));
        }
        if text_feats.shape() != image_feats.shape() {
            return Err(dims(format!(
                "image features {:?} vs text features {:?}",
                image_feats.shape(),
                text_feats.shape()
            )));
        }
        if labels.len() != m || provenance.len() != m {
            return Err(dims(format!(
                "{m} rows but {} labels and {} provenance flags",
                labels.len(),
                provenance.len()
            )));
        }
        for (what, feats) in [("image features", &image_feats), ("text features", &text_feats)] {
            if let Some(row) = (0..m).find(|&i| feats.row(i).norm() == 0.0) {
                return Err(Error::Degenerate { what, row });
            }
        }
        Ok(Self {
            image_feats,
            text_feats,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.image_feats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.image_feats.ncols()
    }

    pub fn image_feats(&self) -> &DMatrix<f64> {
        &self.image_feats
    }

    pub fn text_feats(&self) -> &DMatrix<f64> {
        &self.text_feats
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn ood_fraction(&self) -> f64 {
        let ood = self.provenance.iter().filter(|p| **p == Provenance::Ood).count();
        ood as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Image,
    Text,
}

/// Frozen two-tower projections plus the shape of their low-rank adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    frozen_image: DMatrix<f64>,
    frozen_text: DMatrix<f64>,
    rank: usize,
    tau: f64,
}

impl TwoTowerModel {
    pub fn new(frozen_image: DMatrix<f64>, frozen_text: DMatrix<f64>, rank: usize, tau: f64) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("adapter rank must be >= 1"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(invalid(format!("temperature must be > 0, got {tau}")));
        }
        if frozen_image.shape() != frozen_text.shape() {
            return Err(dims("frozen projections must share their shape"));
        }
        if frozen_image.is_empty() {
            return Err(invalid("frozen projections must be non-empty"));
        }
        Ok(Self {
            frozen_image,
            frozen_text,
            rank,
            tau,
        })
    }

    /// Random Gaussian frozen projections with entries N(0, 1/d_in).
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_embed: usize, rank: usize, tau: f64, rng: &mut R) -> Result<Self> {
        if d_in == 0 || d_embed == 0 {
            return Err(invalid("d_in and d_embed must be >= 1"));
        }
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("finite scale");
        let frozen_image = DMatrix::from_fn(d_in, d_embed, |_, _| normal.sample(rng));
        let frozen_text = DMatrix::from_fn(d_in, d_embed, |_, _| normal.sample(rng));
        Self::new(frozen_image, frozen_text, rank, tau)
    }

    pub fn d_in(&self) -> usize {
        self.frozen_image.nrows()
    }

    pub fn d_embed(&self) -> usize {
        self.frozen_image.ncols()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn frozen(&self, tower: Tower) -> &DMatrix<f64> {
        match tower {
            Tower::Image => &self.frozen_image,
            Tower::Text => &self.frozen_text,
        }
    }

    fn a_len(&self) -> usize {
        self.d_in() * self.rank
    }

    fn tower_len(&self) -> usize {
        self.rank * (self.d_in() + self.d_embed())
    }

    /// Trainable parameter count, 2·r·(d_in + d_embed).
    pub fn n_params(&self) -> usize {
        2 * self.tower_len()
    }

    fn tower_offset(&self, tower: Tower) -> usize {
        match tower {
            Tower::Image => 0,
            Tower::Text => self.tower_len(),
        }
    }

    /// Adapter factors `(A, B)` of one tower as dense matrices.
    pub fn adapter(&self, theta: &DVector<f64>, tower: Tower) -> (DMatrix<f64>, DMatrix<f64>) {
        let off = self.tower_offset(tower);
        let (d_in, d_embed, r) = (self.d_in(), self.d_embed(), self.rank);
        let a = DMatrix::from_row_slice(d_in, r, &theta.as_slice()[off..off + d_in * r]);
        let b_off = off + self.a_len();
        let b = DMatrix::from_row_slice(r, d_embed, &theta.as_slice()[b_off..b_off + r * d_embed]);
        (a, b)
    }

    /// Adapter initialization: `A` small Gaussian, `B` zero, so the
    /// effective projections start at the frozen ones.
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let normal = Normal::new(0.0, ADAPTER_INIT_SCALE).expect("finite scale");
        let mut theta = DVector::zeros(self.n_params());
        for tower in [Tower::Image, Tower::Text] {
            let off = self.tower_offset(tower);
            for v in theta.rows_mut(off, self.a_len()).iter_mut() {
                *v = normal.sample(rng);
            }
        }
        theta
    }

    pub fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(invalid(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Minibatch) -> Result<()> {
        if batch.feature_dim() != self.d_in() {
            return Err(invalid(format!(
                "batch features have dimension {}, model expects {}",
                batch.feature_dim(),
                self.d_in()
            )));
        }
        Ok(())
    }

    /// Embeds feature rows of one tower: `X·W + (X·A)·B`.
    pub fn embed(&self, tower: Tower, feats: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        if feats.ncols() != self.d_in() {
            return Err(invalid(format!(
                "features have dimension {}, model expects {}",
                feats.ncols(),
                self.d_in()
            )));
        }
        let (a, b) = self.adapter(theta, tower);
        Ok(feats * self.frozen(tower) + (feats * a) * b)
    }

    fn forward(&self, batch: &Minibatch, theta: &DVector<f64>) -> Result<Forward> {
        self.check_theta(theta)?;
        self.check_batch(batch)?;
        let (a_img, b_img) = self.adapter(theta, Tower::Image);
        let (a_txt, b_txt) = self.adapter(theta, Tower::Text);
        let proj_img = batch.image_feats() * &a_img;
        let proj_txt = batch.text_feats() * &a_txt;
        let emb_img = batch.image_feats() * self.frozen(Tower::Image) + &proj_img * &b_img;
        let emb_txt = batch.text_feats() * self.frozen(Tower::Text) + &proj_txt * &b_txt;
        check_rows(&emb_img, "image embedding")?;
        check_rows(&emb_txt, "text embedding")?;
        Ok(Forward {
            b_img,
            b_txt,
            proj_img,
            proj_txt,
            emb_img,
            emb_txt,
        })
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// gradient with respect to embedding row `row` of `tower` is `g`.
    fn backprop_row(
        &self,
        tower: Tower,
        fwd: &Forward,
        feats: &DMatrix<f64>,
        row: usize,
        g: &RowDVector<f64>,
        grad: &mut [f64],
    ) {
        let (b, proj) = match tower {
            Tower::Image => (&fwd.b_img, &fwd.proj_img),
            Tower::Text => (&fwd.b_txt, &fwd.proj_txt),
        };
        let (d_in, d_embed, r) = (self.d_in(), self.d_embed(), self.rank);
        let off = self.tower_offset(tower);
        // d/dA[p,k] = x_p (B g)_k
        let bg = b * g.transpose();
        for p in 0..d_in {
            let xp = feats[(row, p)];
            if xp == 0.0 {
                continue;
            }
            for k in 0..r {
                grad[off + p * r + k] += xp * bg[k];
            }
        }
        // d/dB[k,l] = (x A)_k g_l
        let b_off = off + self.a_len();
        for k in 0..r {
            let ak = proj[(row, k)];
            for l in 0..d_embed {
                grad[b_off + k * d_embed + l] += ak * g[l];
            }
        }
    }
}

struct Forward {
    b_img: DMatrix<f64>,
    b_txt: DMatrix<f64>,
    proj_img: DMatrix<f64>,
    proj_txt: DMatrix<f64>,
    emb_img: DMatrix<f64>,
    emb_txt: DMatrix<f64>,
}

fn check_rows(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    match (0..m.nrows()).find(|&i| !(m.row(i).norm() > 0.0)) {
        Some(row) => Err(Error::Degenerate { what, row }),
        None => Ok(()),
    }
}

/// S(i, j) = ⟨I_i, T_j⟩ / (‖I_i‖ ‖T_j‖).
pub fn cosine_similarity_matrix(img: &DMatrix<f64>, txt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if img.ncols() != txt.ncols() {
        return Err(dims(format!(
            "embedding widths differ: {} vs {}",
            img.ncols(),
            txt.ncols()
        )));
    }
    check_rows(img, "image embedding")?;
    check_rows(txt, "text embedding")?;
    let img_n = normalize_rows(img);
    let txt_n = normalize_rows(txt);
    let mut s = img_n * txt_n.transpose();
    s.apply(|v| *v = v.clamp(-1.0, 1.0));
    Ok(s)
}

fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    out
}

/// ŷ = diag(S_C): cosine similarity of each image row with its paired text.
pub fn model_output(model: &TwoTowerModel, batch: &Minibatch, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let fwd = model.forward(batch, theta)?;
    Ok(paired_cosines(&fwd.emb_img, &fwd.emb_txt))
}

fn paired_cosines(img: &DMatrix<f64>, txt: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        img.nrows(),
        (0..img.nrows()).map(|i| {
            let (a, b) = (img.row(i), txt.row(i));
            (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0)
        }),
    )
}

/// Target observation: all paired similarities equal to one.
pub fn target_output(m: usize) -> Result<DVector<f64>> {
    if m == 0 {
        return Err(invalid("target size m must be >= 1"));
    }
    Ok(DVector::from_element(m, 1.0))
}

/// Gradient of cos(u, v) with respect to `u`: (v̂ − c·û)/‖u‖.
fn cosine_grad(u: &RowDVector<f64>, v: &RowDVector<f64>) -> RowDVector<f64> {
    let (nu, nv) = (u.norm(), v.norm());
    let c = u.dot(v) / (nu * nv);
    (v / nv - u * (c / nu)) / nu
}

/// Analytic Jacobian of [`model_output`] with respect to the adapter
/// parameters, `m × n`.
pub fn jacobian(model: &TwoTowerModel, batch: &Minibatch, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let fwd = model.forward(batch, theta)?;
    let (m, n) = (batch.len(), model.n_params());
    // Built transposed so each pair fills one contiguous column.
    let mut jt = DMatrix::<f64>::zeros(n, m);
    for i in 0..m {
        let u = fwd.emb_img.row(i).into_owned();
        let v = fwd.emb_txt.row(i).into_owned();
        let g_img = cosine_grad(&u, &v);
        let g_txt = cosine_grad(&v, &u);
        let col = jt.column_mut(i);
        let grad = col.data.into_slice_mut();
        model.backprop_row(Tower::Image, &fwd, batch.image_feats(), i, &g_img, grad);
        model.backprop_row(Tower::Text, &fwd, batch.text_feats(), i, &g_txt, grad);
    }
    Ok(jt.transpose())
}

/// Central finite-difference Jacobian of [`model_output`].
pub fn jacobian_fd(model: &TwoTowerModel, batch: &Minibatch, theta: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    central_difference(|t| model_output(model, batch, t), theta, h)
}

/// Column-wise central differences `(f(θ + h·e_j) − f(θ − h·e_j)) / 2h` of
/// any vector-valued map.
pub fn central_difference<F>(f: F, theta: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let m = f(theta)?.len();
    let n = theta.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut probe = theta.clone();
    for j in 0..n {
        probe[j] = theta[j] + h;
        let plus = f(&probe)?;
        probe[j] = theta[j] - h;
        let minus = f(&probe)?;
        probe[j] = theta[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(it: I) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE loss over a similarity matrix at temperature `tau`.
pub fn clip_loss(s: &DMatrix<f64>, tau: f64) -> Result<f64> {
    check_loss_input(s, tau)?;
    let m = s.nrows();
    let mut total = 0.0;
    for i in 0..m {
        let diag = s[(i, i)] / tau;
        let row = log_sum_exp((0..m).map(|j| s[(i, j)] / tau));
        let col = log_sum_exp((0..m).map(|j| s[(j, i)] / tau));
        total += (row - diag) + (col - diag);
    }
    Ok((total / m as f64).max(0.0))
}

fn check_loss_input(s: &DMatrix<f64>, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be > 0, got {tau}")));
    }
    if s.nrows() != s.ncols() || s.is_empty() {
        return Err(dims(format!(
            "similarity matrix must be square and non-empty, got {:?}",
            s.shape()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(invalid("similarity matrix has non-finite entries"));
    }
    Ok(())
}

/// ∂L/∂S for [`clip_loss`]: (P + Q − 2I) / (m·τ) with `P` the row softmax and
/// `Q` the column softmax of S/τ.
pub fn clip_loss_grad(s: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    check_loss_input(s, tau)?;
    let m = s.nrows();
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        let lse = log_sum_exp((0..m).map(|j| s[(i, j)] / tau));
        for j in 0..m {
            g[(i, j)] += (s[(i, j)] / tau - lse).exp();
        }
    }
    for j in 0..m {
        let lse = log_sum_exp((0..m).map(|i| s[(i, j)] / tau));
        for i in 0..m {
            g[(i, j)] += (s[(i, j)] / tau - lse).exp();
        }
    }
    for i in 0..m {
        g[(i, i)] -= 2.0;
    }
    Ok(g / (m as f64 * tau))
}

/// Full similarity matrix of a batch at `theta`.
pub fn batch_similarity(model: &TwoTowerModel, batch: &Minibatch, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let fwd = model.forward(batch, theta)?;
    cosine_similarity_matrix(&fwd.emb_img, &fwd.emb_txt)
}

/// Contrastive loss of a batch together with its parameter gradient.
pub fn clip_loss_and_gradient(
    model: &TwoTowerModel,
    batch: &Minibatch,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let fwd = model.forward(batch, theta)?;
    let s = cosine_similarity_matrix(&fwd.emb_img, &fwd.emb_txt)?;
    let loss = clip_loss(&s, model.tau())?;
    let g = clip_loss_grad(&s, model.tau())?;
    let m = batch.len();
    let img_hat = normalize_rows(&fwd.emb_img);
    let txt_hat = normalize_rows(&fwd.emb_txt);
    let mut grad = DVector::zeros(model.n_params());
    for i in 0..m {
        // ∂S_ij/∂I_i = (T̂_j − S_ij Î_i)/‖I_i‖, summed against ∂L/∂S_ij
        let ni = fwd.emb_img.row(i).norm();
        let mut gi = RowDVector::zeros(model.d_embed());
        for j in 0..m {
            gi += (txt_hat.row(j) - img_hat.row(i) * s[(i, j)]) * (g[(i, j)] / ni);
        }
        model.backprop_row(Tower::Image, &fwd, batch.image_feats(), i, &gi, grad.as_mut_slice());

        let nt = fwd.emb_txt.row(i).norm();
        let mut gt = RowDVector::zeros(model.d_embed());
        for k in 0..m {
            gt += (img_hat.row(k) - txt_hat.row(i) * s[(k, i)]) * (g[(k, i)] / nt);
        }
        model.backprop_row(Tower::Text, &fwd, batch.text_feats(), i, &gt, grad.as_mut_slice());
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, d_in: usize) -> Minibatch {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Minibatch::new(
            DMatrix::from_fn(m, d_in, |_, _| normal.sample(rng)),
            DMatrix::from_fn(m, d_in, |_, _| normal.sample(rng)),
            (0..m).collect(),
            vec![Provenance::Id; m],
        )
        .unwrap()
    }

    fn random_theta(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
        let normal = Normal::new(0.0, scale).unwrap();
        DVector::from_fn(n, |_, _| normal.sample(rng))
    }

    #[test]
    fn cosine_examples() {
        let s = cosine_similarity_matrix(&dmatrix![1.0, 0.0], &dmatrix![1.0, 0.0]).unwrap();
        assert_eq!(s, dmatrix![1.0]);
        let s = cosine_similarity_matrix(&dmatrix![1.0, 0.0], &dmatrix![0.0, 1.0]).unwrap();
        assert_eq!(s, dmatrix![0.0]);
        let s = cosine_similarity_matrix(&dmatrix![1.0, 1.0], &dmatrix![1.0, 0.0]).unwrap();
        assert_relative_eq!(s[(0, 0)], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn cosine_zero_row_is_named() {
        let err = cosine_similarity_matrix(&dmatrix![1.0, 0.0; 0.0, 0.0], &dmatrix![1.0, 0.0; 1.0, 1.0]).unwrap_err();
        assert_eq!(
            err,
            Error::Degenerate {
                what: "image embedding",
                row: 1
            }
        );
    }

    #[test]
    fn cosine_is_scale_invariant_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let a = DMatrix::from_fn(4, 5, |_, _| normal.sample(&mut rng));
        let b = DMatrix::from_fn(4, 5, |_, _| normal.sample(&mut rng));
        let mut scaled = a.clone();
        scaled.row_mut(2).scale_mut(7.5);
        let s1 = cosine_similarity_matrix(&a, &b).unwrap();
        let s2 = cosine_similarity_matrix(&scaled, &b).unwrap();
        assert_relative_eq!(s1, s2, epsilon = 1e-12);
    }

    #[test]
    fn target_is_ones() {
        assert_eq!(target_output(1).unwrap(), DVector::from_element(1, 1.0));
        assert_eq!(target_output(3).unwrap(), DVector::from_element(3, 1.0));
        assert_eq!(target_output(10).unwrap(), DVector::from_element(10, 1.0));
        assert!(target_output(0).is_err());
    }

    #[test]
    fn identical_towers_give_unit_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DMatrix::from_fn(6, 4, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let model = TwoTowerModel::new(w.clone(), w, 2, 0.07).unwrap();
        let batch = random_batch(&mut rng, 5, 6);
        let same = Minibatch::new(
            batch.image_feats().clone(),
            batch.image_feats().clone(),
            batch.labels().to_vec(),
            batch.provenance().to_vec(),
        )
        .unwrap();
        let y = model_output(&model, &same, &DVector::zeros(model.n_params())).unwrap();
        assert_relative_eq!(y, DVector::from_element(5, 1.0), epsilon = 1e-14);
    }

    #[test]
    fn parameter_count_and_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = TwoTowerModel::random(32, 16, 2, 0.07, &mut rng).unwrap();
        assert_eq!(model.n_params(), 192);
        let theta = model.init_theta(&mut rng);
        for tower in [Tower::Image, Tower::Text] {
            let (a, b) = model.adapter(&theta, tower);
            assert!(a.iter().any(|v| *v != 0.0));
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn output_rejects_wrong_theta_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = TwoTowerModel::random(4, 3, 1, 0.07, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 2, 4);
        let err = model_output(&model, &batch, &DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = TwoTowerModel::random(7, 5, 2, 0.07, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 4, 7);
        let theta = random_theta(&mut rng, model.n_params(), 0.3);
        let h = jacobian(&model, &batch, &theta).unwrap();
        let fd = jacobian_fd(&model, &batch, &theta, 1e-5).unwrap();
        assert_eq!(h.shape(), (4, model.n_params()));
        assert!((h - fd).amax() < 1e-6);
    }

    #[test]
    fn jacobian_shape_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = TwoTowerModel::random(5, 3, 1, 0.07, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 1, 5);
        let theta = model.init_theta(&mut rng);
        assert_eq!(jacobian(&model, &batch, &theta).unwrap().shape(), (1, model.n_params()));
    }

    #[test]
    fn scale_direction_has_zero_column() {
        // With a rank-1 adapter whose A column is orthogonal to every text
        // feature, the text B factor acts only through a zero projection.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = TwoTowerModel::random(3, 2, 1, 0.07, &mut rng).unwrap();
        let batch = Minibatch::new(
            dmatrix![1.0, 0.5, 0.0; 0.2, 1.0, 0.0],
            dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0],
            vec![0, 1],
            vec![Provenance::Id; 2],
        )
        .unwrap();
        let mut theta = random_theta(&mut rng, model.n_params(), 0.5);
        // text tower starts at offset r·(d_in + d_embed) = 5; A_text = e_3
        theta[5] = 0.0;
        theta[6] = 0.0;
        theta[7] = 1.0;
        let h = jacobian(&model, &batch, &theta).unwrap();
        for col in 8..10 {
            assert!(h.column(col).amax() < 1e-14);
        }
        let fd = jacobian_fd(&model, &batch, &theta, 1e-5).unwrap();
        for col in 8..10 {
            assert!(fd.column(col).amax() < 1e-10);
        }
    }

    #[test]
    fn fd_is_exact_for_linear_maps() {
        let a = dmatrix![1.0, -2.0, 0.5; 3.0, 0.25, -1.0];
        let theta = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let jac = central_difference(|t| Ok(&a * t), &theta, 1e-3).unwrap();
        assert_relative_eq!(jac, a, epsilon = 1e-10);
    }

    #[test]
    fn fd_rejects_zero_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = TwoTowerModel::random(3, 2, 1, 0.07, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 1, 3);
        let theta = model.init_theta(&mut rng);
        assert!(jacobian_fd(&model, &batch, &theta, 0.0).is_err());
    }

    #[test]
    fn jacobian_rows_are_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = TwoTowerModel::random(6, 4, 2, 0.07, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, 6);
        let theta = random_theta(&mut rng, model.n_params(), 0.2);
        let h = jacobian(&model, &batch, &theta).unwrap();

        let mut img = batch.image_feats().clone();
        let mut txt = batch.text_feats().clone();
        let other = random_batch(&mut rng, 1, 6);
        img.set_row(1, &other.image_feats().row(0));
        txt.set_row(1, &other.text_feats().row(0));
        let changed = Minibatch::new(img, txt, batch.labels().to_vec(), batch.provenance().to_vec()).unwrap();
        let h2 = jacobian(&model, &changed, &theta).unwrap();
        assert_eq!(h.row(0), h2.row(0));
        assert_eq!(h.row(2), h2.row(2));
        assert_ne!(h.row(1), h2.row(1));
    }

    #[test]
    fn clip_loss_examples() {
        assert_relative_eq!(clip_loss(&dmatrix![1.0], 1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            clip_loss(&DMatrix::identity(2, 2), 1.0).unwrap(),
            2.0 * (1.0 + (-1.0f64).exp()).ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            clip_loss(&DMatrix::identity(2, 2), 1.0).unwrap(),
            0.62652,
            epsilon = 1e-5
        );
        assert_relative_eq!(
            clip_loss(&dmatrix![1.0, 1.0; 1.0, 1.0], 1.0).unwrap(),
            2.0 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn clip_loss_rejects_bad_input() {
        assert!(clip_loss(&dmatrix![f64::NAN], 1.0).is_err());
        assert!(clip_loss(&dmatrix![1.0], 0.0).is_err());
    }

    #[test]
    fn clip_loss_is_stable_for_large_logits() {
        let s = dmatrix![1.0, -1.0; 0.5, 1.0];
        let loss = clip_loss(&s, 1e-3).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn clip_loss_decreases_with_diagonal() {
        let s = dmatrix![0.2, 0.1, -0.3; 0.4, 0.0, 0.2; 0.1, 0.5, 0.3];
        let mut t = s.clone();
        t[(1, 1)] += 0.05;
        assert!(clip_loss(&t, 0.1).unwrap() < clip_loss(&s, 0.1).unwrap());
    }

    #[test]
    fn clip_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = TwoTowerModel::random(6, 4, 2, 0.5, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, 6);
        let theta = random_theta(&mut rng, model.n_params(), 0.3);
        let (_, grad) = clip_loss_and_gradient(&model, &batch, &theta).unwrap();
        let loss = |t: &DVector<f64>| -> Result<DVector<f64>> {
            let s = batch_similarity(&model, &batch, t)?;
            Ok(DVector::from_element(1, clip_loss(&s, model.tau())?))
        };
        let fd = central_difference(loss, &theta, 1e-5).unwrap();
        assert!((grad.transpose() - fd).amax() < 1e-6);
    }
}
