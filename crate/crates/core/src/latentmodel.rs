//! Variational encoder/decoder with a locally linear latent dynamics model.
//!
//! Observations are randomly cropped, encoded into diagonal Gaussians
//! `(mean, log-std)`, and decoded back to the uncropped frames. A dynamics
//! network maps a latent sample `z` to [`LocalLinearParams`] `(u, v, B, c)`
//! describing the locally linear transition `z' = A z + B a + c` with
//! `A = I + u vᵀ` kept in rank-1 form. The training loss per transition
//! `(o, a, o')` is
//!
//! ```text
//! |o - dec(z)|²/2 + |o' - dec(ẑ')|²/2
//!   + KL(q(z | crop(o)) || N(0, I))
//!   + λ KL(N(Aμ + Ba + c, diag(AΣAᵀ)) || q(z' | crop(o')))
//! ```
//!
//! averaged over the batch, with gradients derived in closed form and checked
//! against finite differences. The encoder also defines the
//! augmentation-invariant distance [`LatentModel::adm_distance`]: the L2
//! distance between encoded means, which downstream reward shaping uses in
//! place of pixel distances.

use rand::Rng;

use crate::diffnet::{Adam, GradStore, LayerSpec, Network, NetworkSpec, Real, Tensor};
use crate::demostore::Transition;
use crate::envsim::Observation;
use crate::{par, Error, Result};

/// Encoder log-std output range. Values outside are clamped and their
/// gradient dropped.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Floor for the predicted next-step variance diagonal, which the rank-1
/// update can otherwise push to zero or below.
const VAR_FLOOR: f64 = 2.061_153_622_438_558e-9; // exp(-20)

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
}

impl<T: Real> LatentGaussian<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<T> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

/// Locally linear transition `z' = (I + u vᵀ) z + B a + c`.
#[derive(Clone, Debug)]
pub struct LocalLinearParams<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    /// Row-major `latent_dim x action_dim`.
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// Random-crop augmentation: frames are edge-padded by `pad` pixels and a
/// window of the original side is cut out at a sampled offset, so the output
/// shape never changes.
#[derive(Clone, Copy, Debug)]
pub struct Augmenter {
    pad: usize,
}

impl Augmenter {
    pub fn new(pad: usize) -> Self {
        Augmenter { pad }
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Offset that reproduces the input exactly.
    pub fn identity_offset(&self) -> (usize, usize) {
        (self.pad, self.pad)
    }

    pub fn sample_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        if self.pad == 0 {
            return (0, 0);
        }
        (rng.gen_range(0..=2 * self.pad), rng.gen_range(0..=2 * self.pad))
    }

    /// Crops CHW `pixels` at `offset`, replicating edge pixels where the
    /// window reaches past the frame.
    pub fn apply<T: Real>(
        &self,
        pixels: &[T],
        channels: usize,
        side: usize,
        offset: (usize, usize),
    ) -> Vec<T> {
        debug_assert_eq!(pixels.len(), channels * side * side);
        if self.pad == 0 || offset == self.identity_offset() {
            return pixels.to_vec();
        }
        let mut out = vec![T::zero(); pixels.len()];
        let pad = self.pad as isize;
        let (ox, oy) = (offset.0 as isize, offset.1 as isize);
        let last = side as isize - 1;
        for c in 0..channels {
            let plane = &pixels[c * side * side..(c + 1) * side * side];
            let out_plane = &mut out[c * side * side..(c + 1) * side * side];
            for y in 0..side as isize {
                let sy = (y + oy - pad).clamp(0, last) as usize;
                for x in 0..side as isize {
                    let sx = (x + ox - pad).clamp(0, last) as usize;
                    out_plane[(y as usize) * side + x as usize] = plane[sy * side + sx];
                }
            }
        }
        out
    }
}

/// Reparameterised sample `z = mean + std * eta`, `eta` standard normal.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(g: &LatentGaussian<T>, rng: &mut R) -> Vec<T> {
    g.mean
        .iter()
        .zip(&g.log_std)
        .map(|(m, l)| *m + l.exp() * T::standard_normal(rng))
        .collect()
}

/// Closed-form KL divergence between diagonal Gaussians of equal dimension.
pub fn kl_gaussians<T: Real>(q1: &LatentGaussian<T>, q2: &LatentGaussian<T>) -> Result<T> {
    if q1.dim() != q2.dim() {
        return Err(Error::Usage(format!(
            "KL between Gaussians of dimension {} and {}",
            q1.dim(),
            q2.dim()
        )));
    }
    let half = T::from_f64(0.5);
    let mut total = T::zero();
    for k in 0..q1.dim() {
        let l1 = q1.log_std[k];
        let l2 = q2.log_std[k];
        let var1 = (l1 + l1).exp();
        let var2 = (l2 + l2).exp();
        let d = q1.mean[k] - q2.mean[k];
        total = total + (l2 - l1) + (var1 + d * d) / (var2 + var2) - half;
    }
    Ok(total)
}

/// Applies the locally linear transition to a Gaussian: mean `Aμ + Ba + c`,
/// covariance `AΣAᵀ` projected to its diagonal via the rank-1 identity
/// `AΣAᵀ = Σ + uvᵀΣ + Σvuᵀ + (vᵀΣv) uuᵀ`.
pub fn predict_next<T: Real>(
    g: &LatentGaussian<T>,
    action: &[T],
    lin: &LocalLinearParams<T>,
) -> Result<LatentGaussian<T>> {
    let dim = g.dim();
    if lin.u.len() != dim || lin.v.len() != dim || lin.c.len() != dim {
        return Err(Error::Usage("local-linear parameter dimensions differ from latent".to_string()));
    }
    if action.is_empty() || lin.b.len() != dim * action.len() {
        return Err(Error::Usage("B matrix shape does not match latent x action".to_string()));
    }
    let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
    if !finite(&lin.u) || !finite(&lin.v) || !finite(&lin.b) || !finite(&lin.c) {
        return Err(Error::Training("non-finite local-linear parameters".to_string()));
    }

    let ad = action.len();
    let var: Vec<T> = g.log_std.iter().map(|l| (*l + *l).exp()).collect();
    let vmu = dot(&lin.v, &g.mean);
    // S = vᵀ Σ v for the rank-1 variance correction.
    let mut s = T::zero();
    for j in 0..dim {
        s = s + lin.v[j] * lin.v[j] * var[j];
    }
    let floor = T::from_f64(VAR_FLOOR);
    let two = T::from_f64(2.0);
    let half = T::from_f64(0.5);
    let mut mean = Vec::with_capacity(dim);
    let mut log_std = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut ba = T::zero();
        for j in 0..ad {
            ba = ba + lin.b[k * ad + j] * action[j];
        }
        mean.push(g.mean[k] + lin.u[k] * vmu + ba + lin.c[k]);
        let v2 = var[k] * (T::one() + two * lin.u[k] * lin.v[k]) + lin.u[k] * lin.u[k] * s;
        let v2 = v2.max(floor);
        log_std.push(v2.ln() * half);
    }
    Ok(LatentGaussian { mean, log_std })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// Architecture knobs for the three networks.
#[derive(Clone, Debug)]
pub struct ModelArch {
    pub image_side: usize,
    pub latent_dim: usize,
    pub action_dim: usize,
    /// Channels in the two strided encoder convolutions.
    pub enc_channels: usize,
    /// Width of the encoder's fully connected trunk.
    pub enc_fc: usize,
    /// Hidden width of the decoder's fully connected trunk.
    pub dec_hidden: usize,
    /// Hidden width of the dynamics network.
    pub dyn_hidden: usize,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 12 || self.image_side % 4 != 0 {
            return Err(Error::Config(format!(
                "image side {} must be a multiple of 4 and at least 12",
                self.image_side
            )));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("action_dim", self.action_dim),
            ("enc_channels", self.enc_channels),
            ("enc_fc", self.enc_fc),
            ("dec_hidden", self.dec_hidden),
            ("dyn_hidden", self.dyn_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn encoder_spec(&self) -> NetworkSpec {
        NetworkSpec::new(&[3, self.image_side, self.image_side])
            .layer(LayerSpec::conv(self.enc_channels, 3, 2, 0).norm().relu())
            .layer(LayerSpec::conv(self.enc_channels, 3, 2, 0).norm().relu())
            .layer(LayerSpec::flatten())
            .layer(LayerSpec::dense(self.enc_fc).norm().relu())
            .layer(LayerSpec::dense(2 * self.latent_dim))
    }

    // The decoder is a plain fully connected map. A translation-equivariant
    // upsampling stack has no cheap way to paint content at a latent-dependent
    // position, and on these scenes it settles for reproducing the static
    // background, which in turn lets the prior collapse the posterior. Giving
    // every output pixel its own weights removes that failure mode.
    fn decoder_spec(&self) -> NetworkSpec {
        let side = self.image_side;
        NetworkSpec::new(&[self.latent_dim])
            .layer(LayerSpec::dense(self.dec_hidden).norm().relu())
            .layer(LayerSpec::dense(3 * side * side))
            .layer(LayerSpec::reshape(&[3, side, side]))
    }

    fn dynamics_spec(&self) -> NetworkSpec {
        let out = self.latent_dim * (3 + self.action_dim);
        NetworkSpec::new(&[self.latent_dim])
            .layer(LayerSpec::dense(self.dyn_hidden).relu())
            .layer(LayerSpec::dense(self.dyn_hidden).relu())
            .layer(LayerSpec::dense(out))
    }
}

/// One training item with all randomness pre-sampled, so the loss is a pure
/// function of parameters and items.
#[derive(Clone, Debug)]
pub struct ModelBatchItem<T> {
    /// Cropped CHW pixels fed to the encoder.
    pub aug_obs: Vec<T>,
    pub aug_next: Vec<T>,
    /// Uncropped CHW reconstruction targets.
    pub target_obs: Vec<T>,
    pub target_next: Vec<T>,
    pub action: Vec<T>,
    /// Standard-normal draw for the reparameterised latent sample.
    pub noise: Vec<T>,
}

/// Gradients of the model loss, one store per network.
pub struct ModelGrads<T> {
    pub encoder: GradStore<T>,
    pub decoder: GradStore<T>,
    pub dynamics: GradStore<T>,
}

/// Per-term loss values, averaged over the batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelLossParts {
    pub reconstruction: f64,
    pub prior_kl: f64,
    pub dynamics_kl: f64,
}

impl ModelLossParts {
    pub fn total(&self, lambda: f64) -> f64 {
        self.reconstruction + self.prior_kl + lambda * self.dynamics_kl
    }
}

/// The encoder, decoder, and dynamics networks.
#[derive(Clone, Debug)]
pub struct LatentModel<T> {
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    pub dynamics: Network<T>,
    arch: ModelArch,
}

/// Initial bias of the encoder's log-std outputs. A unit-variance posterior
/// at initialisation buries the (still small) spread of the means in sampling
/// noise, and the decoder never finds the signal; starting near σ ≈ 0.14
/// lets reconstruction couple to the latent from the first updates.
const INIT_LOG_STD: f64 = -2.0;

impl<T: Real> LatentModel<T> {
    pub fn new<R: Rng + ?Sized>(arch: ModelArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut encoder = Network::new(arch.encoder_spec(), rng)?;
        let head_bias = encoder
            .params_mut()
            .last_mut()
            .expect("encoder has parameters");
        debug_assert_eq!(head_bias.values.len(), 2 * arch.latent_dim);
        for v in head_bias.values[arch.latent_dim..].iter_mut() {
            *v = T::from_f64(INIT_LOG_STD);
        }
        let decoder = Network::new(arch.decoder_spec(), rng)?;
        let dynamics = Network::new(arch.dynamics_spec(), rng)?;
        Ok(LatentModel { encoder, decoder, dynamics, arch })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn frame_len(&self) -> usize {
        3 * self.arch.image_side * self.arch.image_side
    }

    /// Splits a raw encoder output row into a clamped Gaussian.
    fn gaussian_from_row(&self, row: &[T]) -> LatentGaussian<T> {
        let l = self.arch.latent_dim;
        let lo = T::from_f64(LOG_STD_MIN);
        let hi = T::from_f64(LOG_STD_MAX);
        LatentGaussian {
            mean: row[..l].to_vec(),
            log_std: row[l..].iter().map(|x| (*x).min(hi).max(lo)).collect(),
        }
    }

    /// Encodes a batch of CHW pixel frames (already augmented or not).
    /// Deterministic given parameters and input.
    pub fn encode(&self, frames: &[Vec<T>]) -> Result<Vec<LatentGaussian<T>>> {
        if frames.is_empty() {
            return Err(Error::Usage("encode called with no frames".to_string()));
        }
        let fl = self.frame_len();
        if frames.iter().any(|f| f.len() != fl) {
            return Err(Error::Config(format!(
                "encoder expects {} pixels per frame (3x{}x{})",
                fl, self.arch.image_side, self.arch.image_side
            )));
        }
        let side = self.arch.image_side;
        let rows = par::map_chunk_slices(frames, |chunk| -> Result<Vec<LatentGaussian<T>>> {
            let mut data = Vec::with_capacity(chunk.len() * fl);
            for f in chunk {
                data.extend_from_slice(f);
            }
            let x = Tensor::from_vec(&[chunk.len(), 3, side, side], data)?;
            let out = self.encoder.forward(&x)?;
            Ok((0..chunk.len()).map(|i| self.gaussian_from_row(out.item(i))).collect())
        });
        let mut all = Vec::with_capacity(frames.len());
        for part in rows {
            all.extend(part?);
        }
        Ok(all)
    }

    /// Encodes one observation without augmentation.
    pub fn encode_observation(&self, obs: &Observation) -> Result<LatentGaussian<T>> {
        let frame = observation_pixels::<T>(obs);
        Ok(self.encode(&[frame])?.pop().expect("one frame in, one gaussian out"))
    }

    /// Evaluates the dynamics network at one latent point.
    pub fn dynamics_at(&self, z: &[T]) -> Result<LocalLinearParams<T>> {
        if z.len() != self.arch.latent_dim {
            return Err(Error::Usage(format!(
                "latent point has dimension {}, expected {}",
                z.len(),
                self.arch.latent_dim
            )));
        }
        let x = Tensor::from_vec(&[1, self.arch.latent_dim], z.to_vec())?;
        let out = self.dynamics.forward(&x)?;
        Ok(self.split_dynamics_row(out.item(0)))
    }

    fn split_dynamics_row(&self, row: &[T]) -> LocalLinearParams<T> {
        let l = self.arch.latent_dim;
        let ad = self.arch.action_dim;
        LocalLinearParams {
            u: row[..l].to_vec(),
            v: row[l..2 * l].to_vec(),
            b: row[2 * l..2 * l + l * ad].to_vec(),
            c: row[2 * l + l * ad..].to_vec(),
        }
    }

    /// Decodes a batch of latent points to CHW frames.
    pub fn decode(&self, zs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        if zs.is_empty() {
            return Err(Error::Usage("decode called with no latents".to_string()));
        }
        let l = self.arch.latent_dim;
        if zs.iter().any(|z| z.len() != l) {
            return Err(Error::Usage(format!("decoder expects {l}-dimensional latents")));
        }
        let outs = par::map_chunk_slices(zs, |chunk| -> Result<Vec<Vec<T>>> {
            let mut data = Vec::with_capacity(chunk.len() * l);
            for z in chunk {
                data.extend_from_slice(z);
            }
            let x = Tensor::from_vec(&[chunk.len(), l], data)?;
            let y = self.decoder.forward(&x)?;
            Ok((0..chunk.len()).map(|i| y.item(i).to_vec()).collect())
        });
        let mut all = Vec::with_capacity(zs.len());
        for part in outs {
            all.extend(part?);
        }
        Ok(all)
    }

    /// Augmentation-invariant distance: L2 between the encoded means of two
    /// observations, queried with the identity augmentation.
    pub fn adm_distance(&self, o1: &Observation, o2: &Observation) -> Result<f64> {
        let g = self.encode(&[observation_pixels::<T>(o1), observation_pixels::<T>(o2)])?;
        Ok(mean_l2(&g[0], &g[1]))
    }

    /// Combined loss over a batch, with gradients for all three networks.
    /// Gradients and loss are averaged over the batch. `kl_scale` multiplies
    /// the gradients of both KL regularizers (the reported loss keeps the
    /// true values); a value below one relaxes their pull during warmup so
    /// the encoder cannot settle into an uninformative posterior before
    /// reconstruction has had a chance to shape it. The reconstruction path
    /// through the predicted next latent is never scaled, so the dynamics
    /// network keeps learning while the regularizers are gated.
    pub fn model_loss(
        &self,
        items: &[ModelBatchItem<T>],
        lambda: f64,
        kl_scale: f64,
    ) -> Result<(ModelLossParts, ModelGrads<T>)> {
        if items.is_empty() {
            return Err(Error::Usage("model loss needs a non-empty batch".to_string()));
        }
        let fl = self.frame_len();
        let l = self.arch.latent_dim;
        let ad = self.arch.action_dim;
        for (i, it) in items.iter().enumerate() {
            if it.aug_obs.len() != fl
                || it.aug_next.len() != fl
                || it.target_obs.len() != fl
                || it.target_next.len() != fl
            {
                return Err(Error::Usage(format!("item {i} has a wrong frame length")));
            }
            if it.action.len() != ad || it.noise.len() != l {
                return Err(Error::Usage(format!("item {i} has wrong action or noise length")));
            }
        }

        let parts = par::map_chunk_slices(items, |chunk| self.loss_chunk(chunk, lambda, kl_scale));
        let mut sums = ModelLossParts::default();
        let mut grads = ModelGrads {
            encoder: GradStore::zeros_of(&self.encoder),
            decoder: GradStore::zeros_of(&self.decoder),
            dynamics: GradStore::zeros_of(&self.dynamics),
        };
        for part in parts {
            let (p, g) = part?;
            sums.reconstruction += p.reconstruction;
            sums.prior_kl += p.prior_kl;
            sums.dynamics_kl += p.dynamics_kl;
            grads.encoder.add(&g.encoder);
            grads.decoder.add(&g.decoder);
            grads.dynamics.add(&g.dynamics);
        }

        let n = items.len() as f64;
        sums.reconstruction /= n;
        sums.prior_kl /= n;
        sums.dynamics_kl /= n;
        let scale = T::from_f64(1.0 / n);
        grads.encoder.scale(scale);
        grads.decoder.scale(scale);
        grads.dynamics.scale(scale);

        let total = sums.total(lambda);
        if !total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite model loss: reconstruction {}, prior KL {}, dynamics KL {}",
                sums.reconstruction, sums.prior_kl, sums.dynamics_kl
            )));
        }
        Ok((sums, grads))
    }

    /// Loss and gradient sums over one chunk of items.
    #[allow(clippy::type_complexity)]
    fn loss_chunk(
        &self,
        chunk: &[ModelBatchItem<T>],
        lambda: f64,
        kl_scale: f64,
    ) -> Result<(ModelLossParts, ModelGrads<T>)> {
        let n = chunk.len();
        let fl = self.frame_len();
        let l = self.arch.latent_dim;
        let ad = self.arch.action_dim;
        let side = self.arch.image_side;
        let lam = T::from_f64(lambda * kl_scale);
        let klw = T::from_f64(kl_scale);
        let half = T::from_f64(0.5);
        let one = T::one();
        let two = T::from_f64(2.0);
        let lo = T::from_f64(LOG_STD_MIN);
        let hi = T::from_f64(LOG_STD_MAX);
        let floor = T::from_f64(VAR_FLOOR);

        let stack = |pick: &dyn Fn(&ModelBatchItem<T>) -> &[T]| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(n * fl);
            for it in chunk {
                data.extend_from_slice(pick(it));
            }
            Tensor::from_vec(&[n, 3, side, side], data)
        };

        // Forward: encode both frames, sample, run dynamics, decode twice.
        let x0 = stack(&|it| &it.aug_obs)?;
        let (out0, enc_tape0) = self.encoder.forward_tape(&x0)?;
        let x1 = stack(&|it| &it.aug_next)?;
        let (out1, enc_tape1) = self.encoder.forward_tape(&x1)?;

        struct ItemState<T> {
            mean: Vec<T>,
            log_std: Vec<T>,
            mask: Vec<bool>,
            var: Vec<T>,
            z: Vec<T>,
            mean1: Vec<T>,
            log_std1: Vec<T>,
            mask1: Vec<bool>,
            var1: Vec<T>,
        }
        let mut states: Vec<ItemState<T>> = Vec::with_capacity(n);
        let mut z_data = Vec::with_capacity(n * l);
        for (i, it) in chunk.iter().enumerate() {
            let row0 = out0.item(i);
            let row1 = out1.item(i);
            let clamp = |raw: &[T]| -> (Vec<T>, Vec<bool>) {
                let mut ls = Vec::with_capacity(l);
                let mut mask = Vec::with_capacity(l);
                for r in raw {
                    let c = (*r).min(hi).max(lo);
                    mask.push(c == *r);
                    ls.push(c);
                }
                (ls, mask)
            };
            let (log_std, mask) = clamp(&row0[l..]);
            let (log_std1, mask1) = clamp(&row1[l..]);
            let var: Vec<T> = log_std.iter().map(|x| (*x + *x).exp()).collect();
            let var1: Vec<T> = log_std1.iter().map(|x| (*x + *x).exp()).collect();
            let mean = row0[..l].to_vec();
            let mean1 = row1[..l].to_vec();
            let z: Vec<T> = (0..l)
                .map(|k| mean[k] + log_std[k].exp() * it.noise[k])
                .collect();
            z_data.extend_from_slice(&z);
            states.push(ItemState { mean, log_std, mask, var, z, mean1, log_std1, mask1, var1 });
        }

        let z_tensor = Tensor::from_vec(&[n, l], z_data)?;
        let (dyn_out, dyn_tape) = self.dynamics.forward_tape(&z_tensor)?;
        let (dec0_out, dec_tape0) = self.decoder.forward_tape(&z_tensor)?;

        struct DynState<T> {
            u: Vec<T>,
            v: Vec<T>,
            vz: T,
            vmu: T,
            s: T,
            mhat: Vec<T>,
            var_hat: Vec<T>,
            var_mask: Vec<bool>,
        }
        let mut dyn_states: Vec<DynState<T>> = Vec::with_capacity(n);
        let mut zhat_data = Vec::with_capacity(n * l);
        for (i, it) in chunk.iter().enumerate() {
            let lin = self.split_dynamics_row(dyn_out.item(i));
            let st = &states[i];
            let mut ba = vec![T::zero(); l];
            for k in 0..l {
                for j in 0..ad {
                    ba[k] = ba[k] + lin.b[k * ad + j] * it.action[j];
                }
            }
            let vz = dot(&lin.v, &st.z);
            let vmu = dot(&lin.v, &st.mean);
            let mut s = T::zero();
            for j in 0..l {
                s = s + lin.v[j] * lin.v[j] * st.var[j];
            }
            let mut zhat = Vec::with_capacity(l);
            let mut mhat = Vec::with_capacity(l);
            let mut var_hat = Vec::with_capacity(l);
            let mut var_mask = Vec::with_capacity(l);
            for k in 0..l {
                zhat.push(st.z[k] + lin.u[k] * vz + ba[k] + lin.c[k]);
                mhat.push(st.mean[k] + lin.u[k] * vmu + ba[k] + lin.c[k]);
                let raw = st.var[k] * (one + two * lin.u[k] * lin.v[k]) + lin.u[k] * lin.u[k] * s;
                var_mask.push(raw > floor);
                var_hat.push(raw.max(floor));
            }
            zhat_data.extend_from_slice(&zhat);
            dyn_states.push(DynState { u: lin.u, v: lin.v, vz, vmu, s, mhat, var_hat, var_mask });
        }

        let zhat_tensor = Tensor::from_vec(&[n, l], zhat_data)?;
        let (dec1_out, dec_tape1) = self.decoder.forward_tape(&zhat_tensor)?;

        // Loss terms.
        let mut parts = ModelLossParts::default();
        for (i, it) in chunk.iter().enumerate() {
            let mut rec = T::zero();
            let o0 = dec0_out.item(i);
            for (p, t) in o0.iter().zip(&it.target_obs) {
                let d = *p - *t;
                rec = rec + d * d;
            }
            let o1 = dec1_out.item(i);
            for (p, t) in o1.iter().zip(&it.target_next) {
                let d = *p - *t;
                rec = rec + d * d;
            }
            parts.reconstruction += (rec * half).to_f64();

            let st = &states[i];
            let mut klp = T::zero();
            for k in 0..l {
                klp = klp + half * (st.mean[k] * st.mean[k] + st.var[k]) - half - st.log_std[k];
            }
            parts.prior_kl += klp.to_f64();

            let ds = &dyn_states[i];
            let mut kld = T::zero();
            for k in 0..l {
                let d = ds.mhat[k] - st.mean1[k];
                kld = kld + st.log_std1[k] - ds.var_hat[k].ln() * half
                    + (ds.var_hat[k] + d * d) / (st.var1[k] + st.var1[k])
                    - half;
            }
            parts.dynamics_kl += kld.to_f64();
        }

        // Backward. Decoder gradients first, which yield latent gradients.
        let mut grads = ModelGrads {
            encoder: GradStore::zeros_of(&self.encoder),
            decoder: GradStore::zeros_of(&self.decoder),
            dynamics: GradStore::zeros_of(&self.dynamics),
        };

        let mut d_dec0 = Tensor::zeros(dec0_out.shape());
        let mut d_dec1 = Tensor::zeros(dec1_out.shape());
        for (i, it) in chunk.iter().enumerate() {
            let base = i * fl;
            let o0 = dec0_out.item(i);
            let o1 = dec1_out.item(i);
            for j in 0..fl {
                d_dec0.data_mut()[base + j] = o0[j] - it.target_obs[j];
                d_dec1.data_mut()[base + j] = o1[j] - it.target_next[j];
            }
        }
        let g_z_rec = self.decoder.backward(&dec_tape0, &d_dec0, &mut grads.decoder)?;
        let g_zhat = self.decoder.backward(&dec_tape1, &d_dec1, &mut grads.decoder)?;

        // Per-item vector chain rule around the locally linear transition.
        let mut d_dyn = Tensor::zeros(dyn_out.shape());
        let mut g_z_partial = vec![T::zero(); n * l];
        let mut g_mean = vec![T::zero(); n * l];
        let mut g_logstd = vec![T::zero(); n * l];
        let mut d_enc1 = Tensor::zeros(out1.shape());
        for (i, it) in chunk.iter().enumerate() {
            let st = &states[i];
            let ds = &dyn_states[i];
            let gz_hat = g_zhat.item(i);

            // KL terms scaled by lambda.
            let mut gm = Vec::with_capacity(l); // dKL/d mhat
            let mut gs = Vec::with_capacity(l); // dKL/d var_hat
            for k in 0..l {
                let delta = ds.mhat[k] - st.mean1[k];
                gm.push(lam * delta / st.var1[k]);
                let g = if ds.var_mask[k] {
                    lam * (one / (st.var1[k] + st.var1[k]) - one / (ds.var_hat[k] + ds.var_hat[k]))
                } else {
                    T::zero()
                };
                gs.push(g);
            }

            // Gradients into the encoder's second pass.
            {
                let row = d_enc1.data_mut();
                let base = i * 2 * l;
                for k in 0..l {
                    let delta = ds.mhat[k] - st.mean1[k];
                    row[base + k] = -lam * delta / st.var1[k];
                    let gl = lam * (one - (ds.var_hat[k] + delta * delta) / st.var1[k]);
                    row[base + l + k] = if st.mask1[k] { gl } else { T::zero() };
                }
            }

            let s1 = dot(&ds.u, gz_hat);
            let s2 = dot(&ds.u, &gm);
            let t_sum = {
                let mut t = T::zero();
                for k in 0..l {
                    t = t + gs[k] * ds.u[k] * ds.u[k];
                }
                t
            };

            // Dynamics-output gradient row: [u | v | B | c].
            {
                let base = i * l * (3 + ad);
                let row = d_dyn.data_mut();
                for k in 0..l {
                    row[base + k] = ds.vz * gz_hat[k]
                        + ds.vmu * gm[k]
                        + gs[k] * two * (st.var[k] * ds.v[k] + ds.u[k] * ds.s);
                    row[base + l + k] = s1 * st.z[k]
                        + s2 * st.mean[k]
                        + two * st.var[k] * (ds.u[k] * gs[k] + t_sum * ds.v[k]);
                    row[base + 2 * l + ad * l + k] = gz_hat[k] + gm[k];
                }
                for k in 0..l {
                    for j in 0..ad {
                        row[base + 2 * l + k * ad + j] = (gz_hat[k] + gm[k]) * it.action[j];
                    }
                }
            }

            for k in 0..l {
                // z' = z + u (vᵀz) + Ba + c: dz = dz' + v (uᵀ dz').
                g_z_partial[i * l + k] = g_z_rec.item(i)[k] + gz_hat[k] + s1 * ds.v[k];
                // mhat = mean + u (vᵀ mean) + Ba + c, plus the prior KL mean term.
                g_mean[i * l + k] = klw * st.mean[k] + gm[k] + s2 * ds.v[k];
                // var_hat depends on var both directly and through S = vᵀΣv;
                // d var / d log_std = 2 var, plus the prior KL's (var - 1).
                let g_var = gs[k] * (one + two * ds.u[k] * ds.v[k]) + t_sum * ds.v[k] * ds.v[k];
                g_logstd[i * l + k] = klw * (st.var[k] - one) + two * g_var * st.var[k];
            }
        }

        let g_z_dyn = self.dynamics.backward(&dyn_tape, &d_dyn, &mut grads.dynamics)?;

        // Assemble the encoder's first-pass gradient.
        let mut d_enc0 = Tensor::zeros(out0.shape());
        for (i, it) in chunk.iter().enumerate() {
            let st = &states[i];
            let base = i * 2 * l;
            let row = d_enc0.data_mut();
            for k in 0..l {
                let gz = g_z_partial[i * l + k] + g_z_dyn.item(i)[k];
                row[base + k] = g_mean[i * l + k] + gz;
                let sigma = st.log_std[k].exp();
                let gl = g_logstd[i * l + k] + gz * sigma * it.noise[k];
                row[base + l + k] = if st.mask[k] { gl } else { T::zero() };
            }
        }

        self.encoder.backward(&enc_tape0, &d_enc0, &mut grads.encoder)?;
        self.encoder.backward(&enc_tape1, &d_enc1, &mut grads.encoder)?;

        Ok((parts, grads))
    }
}

/// CHW pixels of an observation converted to `T`.
pub fn observation_pixels<T: Real>(obs: &Observation) -> Vec<T> {
    obs.pixels().iter().map(|v| T::from_f64(f64::from(*v))).collect()
}

/// L2 distance between the means of two Gaussians, in `f64`.
pub fn mean_l2<T: Real>(a: &LatentGaussian<T>, b: &LatentGaussian<T>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut acc = 0.0f64;
    for (x, y) in a.mean.iter().zip(&b.mean) {
        let d = Real::to_f64(*x) - Real::to_f64(*y);
        acc += d * d;
    }
    acc.sqrt()
}

/// Trains a [`LatentModel`] with one Adam optimiser per network.
pub struct ModelTrainer<T: Real> {
    pub model: LatentModel<T>,
    pub augmenter: Augmenter,
    pub lambda: f64,
    /// Updates during which both KL gradients are held at zero so
    /// reconstruction couples to the latent first. Without the hold the
    /// regularizers collapse the posterior before the decoder learns to
    /// read the code, and reconstruction never recovers.
    pub kl_hold: usize,
    /// Updates over which the KL gradients then ramp linearly from zero to
    /// full strength. Zero applies full strength right after the hold.
    pub kl_warmup: usize,
    updates: usize,
    enc_opt: Adam<T>,
    dec_opt: Adam<T>,
    dyn_opt: Adam<T>,
}

impl<T: Real> ModelTrainer<T> {
    pub fn new(model: LatentModel<T>, lr: f64, lambda: f64, crop_pad: usize) -> Self {
        ModelTrainer {
            model,
            augmenter: Augmenter::new(crop_pad),
            lambda,
            kl_hold: 0,
            kl_warmup: 0,
            updates: 0,
            enc_opt: Adam::new(lr),
            dec_opt: Adam::new(lr),
            dyn_opt: Adam::new(lr),
        }
    }

    /// Number of optimisation steps taken so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    /// KL gradient weight for the upcoming update: zero through the hold,
    /// then a linear ramp to one over the warmup window.
    fn kl_scale(&self) -> f64 {
        if self.updates < self.kl_hold {
            0.0
        } else if self.kl_warmup == 0 {
            1.0
        } else {
            (((self.updates - self.kl_hold) as f64 + 1.0) / self.kl_warmup as f64).min(1.0)
        }
    }

    /// Builds a training item from a transition, drawing crop offsets and
    /// latent noise from `rng`.
    pub fn assemble_item<R: Rng + ?Sized>(
        &self,
        tr: &Transition,
        rng: &mut R,
    ) -> ModelBatchItem<T> {
        let side = self.model.arch.image_side;
        let target_obs = observation_pixels::<T>(&tr.obs);
        let target_next = observation_pixels::<T>(&tr.next_obs);
        let off0 = self.augmenter.sample_offset(rng);
        let off1 = self.augmenter.sample_offset(rng);
        let aug_obs = self.augmenter.apply(&target_obs, 3, side, off0);
        let aug_next = self.augmenter.apply(&target_next, 3, side, off1);
        let noise: Vec<T> =
            (0..self.model.arch.latent_dim).map(|_| T::standard_normal(rng)).collect();
        let action: Vec<T> = tr.action.iter().map(|a| T::from_f64(*a)).collect();
        ModelBatchItem { aug_obs, aug_next, target_obs, target_next, action, noise }
    }

    /// One optimisation step on a batch of transitions. Returns the loss.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        rng: &mut R,
    ) -> Result<ModelLossParts> {
        let items: Vec<ModelBatchItem<T>> =
            batch.iter().map(|tr| self.assemble_item(tr, rng)).collect();
        let (parts, grads) = self.model.model_loss(&items, self.lambda, self.kl_scale())?;
        self.model.encoder.apply_grads(&grads.encoder);
        self.model.decoder.apply_grads(&grads.decoder);
        self.model.dynamics.apply_grads(&grads.dynamics);
        self.enc_opt.step(&mut self.model.encoder)?;
        self.dec_opt.step(&mut self.model.decoder)?;
        self.dyn_opt.step(&mut self.model.dynamics)?;
        self.updates += 1;
        Ok(parts)
    }
}
