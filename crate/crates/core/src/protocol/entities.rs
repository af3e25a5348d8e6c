//! Per-party state. S0 never holds the secret key, seeds or unmasked
//! gradients; S1 never holds a masked update.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::encoding::{FixedPointParams, Modulus, QuantizedVector};
use crate::error::{invalid, Error, Result};
use crate::jl::{sample_matrix, ProjectionMatrix};
use crate::learning::{compute_gradient, reference_gradient, Architecture, Dataset, Model};
use crate::masking::{apply_mask, derive_mask, MaskSeed};
use crate::oracle::l2_norm;
use crate::paillier::{keygen, Ciphertext, KeySecurity, PaillierPublicKey, PaillierSecretKey};
use crate::protocol::messages::{Message, ProjectionDescriptor};
use crate::protocol::secure::{
    compute_trust_weights, decode_aggregate, sec_agg_s0, sec_agg_s1, sec_cos_s0, sec_cos_s1, sec_norm_s0,
    sec_norm_s1, CosRecovery, NormPairData, NormRecovery, TrustWeights,
};
use crate::seeds::derive_u64;

fn model_from_init(arch: Architecture, msg: &Message) -> Result<(FixedPointParams, f64, Model)> {
    match msg {
        Message::InitModel { modulus, f, fw, clip, lr, weights } => {
            let params = FixedPointParams::new(*modulus, *f, *fw, *clip)?;
            Ok((params, *lr, Model::from_params(arch, weights.clone())?))
        }
        other => Err(Error::Protocol(format!("expected INIT_MODEL, got {}", other.msg_type().name()))),
    }
}

fn apply_global(model: &mut Model, params: &FixedPointParams, lr: f64, msg: &Message) -> Result<Vec<f64>> {
    match msg {
        Message::GlobalGrad(agg) => {
            if agg.modulus() != params.modulus || agg.dim() != model.dim() {
                return Err(Error::Protocol("GLOBAL_GRAD shape mismatch".into()));
            }
            let g = decode_aggregate(agg, params);
            model.apply_update(&g, lr)?;
            Ok(g)
        }
        other => Err(Error::Protocol(format!("expected GLOBAL_GRAD, got {}", other.msg_type().name()))),
    }
}

/// Seed used for client `id`'s mini-batch in `round`. Shared with the
/// plaintext baselines.
pub fn batch_seed(data_seed: u64, id: u32, round: u32) -> u64 {
    derive_u64(data_seed, "client-batch", &[id as u64, round as u64])
}

/// A client's local update before and after masking.
#[derive(Clone, Debug)]
pub struct MaskedUpdate {
    pub message: Message,
    /// The quantized gradient g̃. Kept by the harness for oracle checks
    /// only; it never leaves the client over the network.
    pub quantized: QuantizedVector,
    pub saturations: usize,
}

pub struct ClientState {
    id: u32,
    arch: Architecture,
    shard: Dataset,
    mask_seed: MaskSeed,
    batch_size: usize,
    data_seed: u64,
    params: Option<FixedPointParams>,
    lr: f64,
    model: Option<Model>,
}

impl ClientState {
    pub fn new(id: u32, arch: Architecture, shard: Dataset, mask_seed: [u8; 32], batch_size: usize, data_seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return invalid(format!("client {id} has an empty shard"));
        }
        if batch_size == 0 {
            return invalid("batch size must be positive");
        }
        Ok(ClientState {
            id,
            arch,
            shard,
            mask_seed: MaskSeed { client_id: id, seed: mask_seed },
            batch_size,
            data_seed,
            params: None,
            lr: 0.0,
            model: None,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn modulus(&self) -> Option<Modulus> {
        self.params.map(|p| p.modulus)
    }

    pub fn on_init_model(&mut self, msg: &Message) -> Result<()> {
        let (params, lr, model) = model_from_init(self.arch, msg)?;
        self.params = Some(params);
        self.lr = lr;
        self.model = Some(model);
        Ok(())
    }

    pub fn seed_registration(&self) -> Message {
        Message::SeedReg(self.mask_seed.clone())
    }

    fn ready(&self) -> Result<(&FixedPointParams, &Model)> {
        match (&self.params, &self.model) {
            (Some(p), Some(m)) => Ok((p, m)),
            _ => Err(Error::Protocol(format!("client {} has no model yet", self.id))),
        }
    }

    /// Mini-batch gradient on the local shard.
    pub fn local_gradient(&self, round: u32) -> Result<Vec<f64>> {
        let (_, model) = self.ready()?;
        let b = self.batch_size.min(self.shard.len());
        compute_gradient(model, &self.shard, b, batch_seed(self.data_seed, self.id, round))
    }

    /// `m = g̃ + r mod q` for the submitted gradient `g`.
    pub fn masked_update(&self, g: &[f64], round: u32) -> Result<MaskedUpdate> {
        let (params, model) = self.ready()?;
        if g.len() != model.dim() {
            return invalid("gradient dimension mismatch");
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("client {} produced a non-finite gradient at coordinate {j}", self.id)));
        }
        let (quantized, saturations) = QuantizedVector::encode(g, params);
        let r = derive_mask(&self.mask_seed, round, g.len(), params.modulus);
        let m = apply_mask(&quantized, &r)?;
        Ok(MaskedUpdate { message: Message::MaskedUpdate(m), quantized, saturations })
    }

    pub fn on_global_grad(&mut self, msg: &Message) -> Result<()> {
        let params = *self.ready()?.0;
        apply_global(self.model.as_mut().unwrap(), &params, self.lr, msg)?;
        Ok(())
    }
}

/// S0: holds the model, the projection, the public key, the encrypted mask
/// packs and the current round's masked updates.
pub struct ServerS0State {
    params: FixedPointParams,
    lr: f64,
    model: Model,
    projection: ProjectionMatrix,
    descriptor: ProjectionDescriptor,
    pk: Option<PaillierPublicKey>,
    packs: BTreeMap<(u32, u32), Vec<Ciphertext>>,
    masked: BTreeMap<u32, QuantizedVector>,
    compressed: BTreeMap<u32, QuantizedVector>,
    std_grad: Option<QuantizedVector>,
}

impl ServerS0State {
    /// `k = None` uses the uncompressed identity projection.
    pub fn new(params: FixedPointParams, lr: f64, model: Model, k: Option<usize>, projection_seed: [u8; 32]) -> Result<Self> {
        let d = model.dim();
        let (projection, descriptor) = match k {
            Some(k) => (
                sample_matrix(projection_seed, k, d)?,
                ProjectionDescriptor::Rademacher { seed: projection_seed, k: k as u32, d: d as u32 },
            ),
            None => (ProjectionMatrix::identity(d)?, ProjectionDescriptor::Identity { d: d as u32 }),
        };
        Ok(ServerS0State {
            params,
            lr,
            model,
            projection,
            descriptor,
            pk: None,
            packs: BTreeMap::new(),
            masked: BTreeMap::new(),
            compressed: BTreeMap::new(),
            std_grad: None,
        })
    }

    pub fn params(&self) -> &FixedPointParams {
        &self.params
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.projection
    }

    /// The stored encrypted mask pack for `(client, round)`, if not yet used.
    pub fn mask_pack(&self, client: u32, round: u32) -> Option<&[Ciphertext]> {
        self.packs.get(&(client, round)).map(Vec::as_slice)
    }

    pub fn init_model(&self) -> Message {
        Message::InitModel {
            modulus: self.params.modulus,
            f: self.params.f,
            fw: self.params.fw,
            clip: self.params.clip,
            lr: self.lr,
            weights: self.model.params().to_vec(),
        }
    }

    pub fn init_projection(&self) -> Message {
        Message::InitProjSeed(self.descriptor)
    }

    pub fn on_init_pk(&mut self, msg: &Message) -> Result<()> {
        match msg {
            Message::InitPk(pk) => {
                self.pk = Some(pk.clone());
                Ok(())
            }
            other => Err(Error::Protocol(format!("S0 expected INIT_PK, got {}", other.msg_type().name()))),
        }
    }

    pub fn on_enc_mask_pack(&mut self, round: u32, msg: &Message) -> Result<()> {
        match msg {
            Message::EncMaskPack { client_id, ciphertexts } => {
                if ciphertexts.len() != self.projection.k() {
                    return Err(Error::Protocol(format!(
                        "mask pack for client {client_id} has {} ciphertexts, expected {}",
                        ciphertexts.len(),
                        self.projection.k()
                    )));
                }
                self.packs.insert((*client_id, round), ciphertexts.clone());
                Ok(())
            }
            other => Err(Error::Protocol(format!("S0 expected ENC_MASK_PACK, got {}", other.msg_type().name()))),
        }
    }

    /// Drops packs of unselected clients once `round` is over.
    pub fn end_round(&mut self, round: u32) {
        self.packs.retain(|&(_, t), _| t > round);
    }

    pub fn begin_round(&mut self) {
        self.masked.clear();
        self.compressed.clear();
        self.std_grad = None;
    }

    pub fn on_masked_update(&mut self, client: u32, msg: &Message) -> Result<()> {
        match msg {
            Message::MaskedUpdate(m) => {
                if m.dim() != self.model.dim() || m.modulus() != self.params.modulus {
                    return Err(Error::Protocol(format!("malformed masked update from client {client}")));
                }
                self.masked.insert(client, m.clone());
                Ok(())
            }
            other => Err(Error::Protocol(format!("S0 expected MASKED_UPDATE, got {}", other.msg_type().name()))),
        }
    }

    pub fn on_std_grad(&mut self, msg: &Message) -> Result<()> {
        match msg {
            Message::StdGrad(g) if g.dim() == self.model.dim() => {
                self.std_grad = Some(g.clone());
                Ok(())
            }
            other => Err(Error::Protocol(format!("S0 got unusable {}", other.msg_type().name()))),
        }
    }

    fn masked_of(&self, client: u32) -> Result<&QuantizedVector> {
        self.masked.get(&client).ok_or_else(|| Error::Protocol(format!("no masked update from client {client}")))
    }

    /// SecNorm: compress the masked update and fold it into the client's
    /// encrypted mask pack for this round. The pack is consumed.
    pub fn norm_pair(&mut self, client: u32, round: u32) -> Result<Message> {
        let pk = self.pk.clone().ok_or_else(|| Error::Protocol("S0 has no public key".into()))?;
        let ms = self.projection.project_mod_q(self.masked_of(client)?)?;
        let pack = self
            .packs
            .remove(&(client, round))
            .ok_or_else(|| Error::Protocol(format!("no precomputed mask pack for client {client} in round {round}")))?;
        let NormPairData { c_sum, sq_norm } = sec_norm_s0(&pk, &ms, &pack)?;
        self.compressed.insert(client, ms);
        Ok(Message::NormPair { client_id: client, c_sum, sq_norm })
    }

    pub fn cos_share(&self, client: u32) -> Result<Message> {
        let std = self.std_grad.as_ref().ok_or_else(|| Error::Protocol("S0 has no reference gradient".into()))?;
        Ok(Message::CosP0 { client_id: client, p0: sec_cos_s0(self.masked_of(client)?, std)? })
    }

    /// Unmasks the weighted aggregate and applies it to the global model.
    pub fn aggregate(&mut self, msg: &Message) -> Result<(Message, Vec<f64>, bool)> {
        let (no_trust, weights, mask_sum) = match msg {
            Message::WeightsAndMaskSum { no_trust, weights, mask_sum } => (*no_trust, weights, mask_sum),
            other => return Err(Error::Protocol(format!("S0 expected WEIGHTS_AND_MASKSUM, got {}", other.msg_type().name()))),
        };
        let mut masked = Vec::with_capacity(weights.len());
        let mut wq = Vec::with_capacity(weights.len());
        for &(id, w) in weights {
            masked.push(self.masked_of(id)?.clone());
            wq.push(w);
        }
        if masked.is_empty() {
            return Err(Error::Protocol("empty weight list".into()));
        }
        let (agg, g) = sec_agg_s0(&masked, &wq, mask_sum, &self.params)?;
        self.model.apply_update(&g, self.lr)?;
        Ok((Message::GlobalGrad(agg), g, no_trust))
    }
}

/// How S1 turns trust scores into weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Trust,
    /// `ω_i = 1/n`: FedAvg through the same secure aggregation.
    Uniform,
}

/// S1: holds the key pair, the mask seeds, the trusted dataset and a copy
/// of the model.
pub struct ServerS1State {
    arch: Architecture,
    pk: PaillierPublicKey,
    sk: PaillierSecretKey,
    trusted: Dataset,
    weighting: Weighting,
    params: Option<FixedPointParams>,
    lr: f64,
    model: Option<Model>,
    projection: Option<ProjectionMatrix>,
    seeds: BTreeMap<u32, MaskSeed>,
    mask_sq_norms: BTreeMap<(u32, u32), u128>,
    std_grad: Option<(QuantizedVector, f64)>,
    norms: BTreeMap<u32, NormRecovery>,
    cosines: BTreeMap<u32, CosRecovery>,
}

impl ServerS1State {
    pub fn new<R: RngCore + ?Sized>(
        arch: Architecture,
        trusted: Dataset,
        kappa1: u32,
        security: KeySecurity,
        weighting: Weighting,
        rng: &mut R,
    ) -> Result<Self> {
        if trusted.is_empty() {
            return invalid("trusted dataset is empty");
        }
        let (pk, sk) = keygen(kappa1, security, rng)?;
        Ok(ServerS1State {
            arch,
            pk,
            sk,
            trusted,
            weighting,
            params: None,
            lr: 0.0,
            model: None,
            projection: None,
            seeds: BTreeMap::new(),
            mask_sq_norms: BTreeMap::new(),
            std_grad: None,
            norms: BTreeMap::new(),
            cosines: BTreeMap::new(),
        })
    }

    pub fn public_key(&self) -> &PaillierPublicKey {
        &self.pk
    }

    pub fn modulus(&self) -> Option<Modulus> {
        self.params.map(|p| p.modulus)
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<num_bigint::BigUint> {
        self.sk.decrypt(&self.pk, c)
    }

    /// The round-`round` mask of `client`, derived from its registered seed.
    pub fn client_mask(&self, client: u32, round: u32) -> Result<QuantizedVector> {
        self.mask(client, round)
    }

    pub fn projection(&self) -> Option<&ProjectionMatrix> {
        self.projection.as_ref()
    }

    pub fn init_pk(&self) -> Message {
        Message::InitPk(self.pk.clone())
    }

    pub fn on_init_model(&mut self, msg: &Message) -> Result<()> {
        let (params, lr, model) = model_from_init(self.arch, msg)?;
        self.params = Some(params);
        self.lr = lr;
        self.model = Some(model);
        Ok(())
    }

    pub fn on_init_projection(&mut self, msg: &Message) -> Result<()> {
        let p = match msg {
            Message::InitProjSeed(ProjectionDescriptor::Rademacher { seed, k, d }) => {
                sample_matrix(*seed, *k as usize, *d as usize)?
            }
            Message::InitProjSeed(ProjectionDescriptor::Identity { d }) => ProjectionMatrix::identity(*d as usize)?,
            other => return Err(Error::Protocol(format!("S1 expected INIT_PROJ_SEED, got {}", other.msg_type().name()))),
        };
        self.projection = Some(p);
        Ok(())
    }

    pub fn on_seed_reg(&mut self, sender: u32, msg: &Message) -> Result<()> {
        match msg {
            Message::SeedReg(seed) if seed.client_id == sender => {
                self.seeds.insert(sender, seed.clone());
                Ok(())
            }
            Message::SeedReg(seed) => Err(Error::Protocol(format!(
                "client {sender} registered a seed for client {}",
                seed.client_id
            ))),
            other => Err(Error::Protocol(format!("S1 expected SEED_REG, got {}", other.msg_type().name()))),
        }
    }

    fn ready(&self) -> Result<(FixedPointParams, &ProjectionMatrix)> {
        match (&self.params, &self.projection) {
            (Some(p), Some(r)) => Ok((*p, r)),
            _ => Err(Error::Protocol("S1 is not initialized".into())),
        }
    }

    fn mask(&self, client: u32, round: u32) -> Result<QuantizedVector> {
        let (params, proj) = self.ready()?;
        let seed = self.seeds.get(&client).ok_or_else(|| Error::Protocol(format!("no mask seed for client {client}")))?;
        Ok(derive_mask(seed, round, proj.d(), params.modulus))
    }

    /// Offline: `Enc(R r_i^t)` coordinatewise.
    pub fn mask_pack<R: RngCore + ?Sized>(&mut self, client: u32, round: u32, rng: &mut R) -> Result<Message> {
        let r = self.mask(client, round)?;
        let rs = self.ready()?.1.project_mod_q(&r)?;
        let ciphertexts = rs.residues().iter().map(|&x| self.pk.encrypt_u128(x, rng)).collect::<Result<Vec<_>>>()?;
        self.mask_sq_norms.insert((client, round), rs.sq_norm());
        Ok(Message::EncMaskPack { client_id: client, ciphertexts })
    }

    /// Computes, quantizes and returns the reference gradient for the round.
    pub fn reference(&mut self) -> Result<(Message, usize)> {
        let (params, _) = self.ready()?;
        let model = self.model.as_ref().ok_or_else(|| Error::Protocol("S1 has no model".into()))?;
        let g = reference_gradient(model, &self.trusted)?;
        let (q, sat) = QuantizedVector::encode(&g, &params);
        let norm_std = l2_norm(&q.decode(&params));
        if norm_std == 0.0 {
            return Err(Error::Protocol("reference gradient has zero norm".into()));
        }
        self.std_grad = Some((q.clone(), norm_std));
        self.norms.clear();
        self.cosines.clear();
        Ok((Message::StdGrad(q), sat))
    }

    pub fn end_round(&mut self, round: u32) {
        self.mask_sq_norms.retain(|&(_, t), _| t > round);
    }

    pub fn norm_std(&self) -> Option<f64> {
        self.std_grad.as_ref().map(|s| s.1)
    }

    pub fn on_norm_pair(&mut self, round: u32, msg: &Message) -> Result<NormRecovery> {
        let (params, proj) = self.ready()?;
        let (client_id, c_sum, sq_norm) = match msg {
            Message::NormPair { client_id, c_sum, sq_norm } => (*client_id, c_sum.clone(), *sq_norm),
            other => return Err(Error::Protocol(format!("S1 expected NORM_PAIR, got {}", other.msg_type().name()))),
        };
        let divisor = proj.norm_divisor();
        let r_sq = self
            .mask_sq_norms
            .remove(&(client_id, round))
            .ok_or_else(|| Error::Protocol(format!("no mask norm for client {client_id} in round {round}")))?;
        let rec = sec_norm_s1(&self.pk, &self.sk, &NormPairData { c_sum, sq_norm }, r_sq, &params, divisor)?;
        self.norms.insert(client_id, rec);
        Ok(rec)
    }

    pub fn on_cos_share(&mut self, round: u32, msg: &Message) -> Result<CosRecovery> {
        let (params, _) = self.ready()?;
        let (client_id, p0) = match msg {
            Message::CosP0 { client_id, p0 } => (*client_id, *p0),
            other => return Err(Error::Protocol(format!("S1 expected COS_P0, got {}", other.msg_type().name()))),
        };
        let (std, norm_std) = self.std_grad.clone().ok_or_else(|| Error::Protocol("S1 has no reference gradient".into()))?;
        let norm = self
            .norms
            .get(&client_id)
            .ok_or_else(|| Error::Protocol(format!("cosine share before norm for client {client_id}")))?
            .estimate;
        let rec = sec_cos_s1(p0, &self.mask(client_id, round)?, &std, norm, norm_std, &params)?;
        self.cosines.insert(client_id, rec);
        Ok(rec)
    }

    /// Trust scores, quantized weights and the weighted mask sum for the
    /// selected clients (ascending ids).
    pub fn weights_and_mask_sum(&self, round: u32, selected: &[u32]) -> Result<(Message, TrustWeights)> {
        let (params, _) = self.ready()?;
        let norm_std = self.norm_std().ok_or_else(|| Error::Protocol("S1 has no reference gradient".into()))?;
        let mut cos = Vec::with_capacity(selected.len());
        let mut norms = Vec::with_capacity(selected.len());
        let mut masks = Vec::with_capacity(selected.len());
        for &id in selected {
            let c = self.cosines.get(&id).ok_or_else(|| Error::Protocol(format!("no cosine for client {id}")))?;
            cos.push(c.cosine);
            norms.push(self.norms[&id].estimate);
            masks.push(self.mask(id, round)?);
        }
        let tw = match self.weighting {
            Weighting::Trust => compute_trust_weights(&cos, &norms, norm_std)?,
            Weighting::Uniform => {
                let n = selected.len() as f64;
                TrustWeights { trust: vec![1.0; selected.len()], weights: vec![1.0 / n; selected.len()], no_trust: false }
            }
        };
        let (wq, mask_sum) = sec_agg_s1(&tw.weights, &masks, &params)?;
        let weights = selected.iter().copied().zip(wq.into_iter().map(|w| params.modulus.reduce(w))).collect();
        Ok((Message::WeightsAndMaskSum { no_trust: tw.no_trust, weights, mask_sum }, tw))
    }

    pub fn on_global_grad(&mut self, msg: &Message) -> Result<()> {
        let (params, _) = self.ready()?;
        let model = self.model.as_mut().ok_or_else(|| Error::Protocol("S1 has no model".into()))?;
        apply_global(model, &params, self.lr, msg)?;
        Ok(())
    }
}
