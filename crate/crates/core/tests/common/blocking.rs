//! Gradient-blocking oracle. Context-only tokens never occur in the current
//! sentence, so their source-embedding rows receive gradient only through
//! the context encoder passes.

use cachemt::context::{build_context, full_mask, ContextCache, ContextEntry};
use cachemt::model::{Batch, Example, Memory, Model, ModelConfig, Preset, Variant};
use cachemt::nn::Fwd;
use cachemt::shortening::{ShortenedStates, ShorteningMode};
use cachemt::training::label_smoothed_nll;
use candle_core::{DType, Device, Tensor};

pub const CURRENT: [u32; 3] = [5, 6, 7];
pub const NEAR: [u32; 3] = [8, 9, 8];
pub const FAR: [u32; 4] = [10, 11, 10, 11];

pub fn model(grad_flow: usize) -> Model {
    let mut cfg = ModelConfig::new(Preset::Desk, Variant::ShortGroup, 16, 16).with_context(2).with_k(3);
    cfg.layers = 1;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 8;
    cfg.max_positions = 16;
    cfg.shortening.categorizer_hidden = 6;
    cfg.grad_flow = grad_flow;
    Model::new(cfg, DType::F64).unwrap()
}

pub fn example() -> Example {
    Example {
        src: CURRENT.to_vec(),
        tgt: vec![12, 13],
        context: vec![NEAR.to_vec(), FAR.to_vec()],
    }
}

pub type Grads = Vec<(String, Vec<f64>)>;

pub fn gradients(model: &Model, loss: &Tensor) -> Grads {
    let grads = loss.backward().unwrap();
    model
        .store()
        .iter()
        .map(|(name, var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                None => vec![0.0; var.elem_count()],
            };
            (name.to_string(), g)
        })
        .collect()
}

pub fn training_gradients(model: &Model) -> Grads {
    let ex = example();
    let batch = Batch::new(&[&ex], 2, DType::F64).unwrap();
    let logits = model.forward(&batch, &mut Fwd::eval()).unwrap();
    let (loss, _) = label_smoothed_nll(&logits, &batch.tgt_out.ids, &batch.tgt_out.mask, 0.0).unwrap();
    gradients(model, &loss)
}

/// The same loss assembled by hand, where the encoder output of every context
/// sentence farther than `live` is replaced by a constant copy. The shortener
/// still sees it, so shortening parameters keep their gradient.
pub fn substituted_gradients(model: &Model, live: usize) -> Grads {
    let shortener = model.shortener().unwrap();
    let mut fwd = Fwd::eval();
    let encode = |ids: &[u32], fwd: &mut Fwd| {
        let ids_t = Tensor::from_vec(ids.to_vec(), (1, ids.len()), &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, ids.len()), DType::F64, &Device::Cpu).unwrap();
        let h = model.encode_batch(&ids_t, &mask, fwd).unwrap();
        (h, mask)
    };
    let mut cache = ContextCache::new(2);
    for (distance, ids, index) in [(2, &FAR[..], 0), (1, &NEAR[..], 1)] {
        let (mut h, mask) = encode(ids, &mut fwd);
        if distance > live {
            let values = h.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            h = Tensor::from_vec(values, h.dims(), &Device::Cpu).unwrap();
        }
        let (g, _) = shortener.forward_batch(&h, &mask, &mut fwd).unwrap();
        let states = ShortenedStates::new(g.squeeze(0).unwrap(), ids.len(), ShorteningMode::Group).unwrap();
        cache.push(ContextEntry::new(states, index)).unwrap();
    }
    let (h, mask) = encode(&CURRENT, &mut fwd);
    let (g, _) = shortener.forward_batch(&h, &mask, &mut fwd).unwrap();
    let current = ShortenedStates::new(g.squeeze(0).unwrap(), CURRENT.len(), ShorteningMode::Group).unwrap();
    let a = build_context(&cache, Some(&current), model.context_embeddings().unwrap()).unwrap();
    let tokens = a.tokens.unwrap();
    let n = tokens.dim(0).unwrap();
    let memory = Memory {
        src: h,
        src_mask: mask,
        ctx: Some((tokens.unsqueeze(0).unwrap(), full_mask(n, DType::F64).unwrap())),
    };
    let ex = example();
    let batch = Batch::new(&[&ex], 2, DType::F64).unwrap();
    let logits = model.decode(&batch.tgt_in.ids, &memory, &mut fwd).unwrap();
    let (loss, _) = label_smoothed_nll(&logits, &batch.tgt_out.ids, &batch.tgt_out.mask, 0.0).unwrap();
    gradients(model, &loss)
}

pub fn max_grad_diff(a: &Grads, b: &Grads) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|((na, ga), (nb, gb))| {
            assert_eq!(na, nb);
            ga.iter().zip(gb).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

pub fn embedding_row_norm(grads: &Grads, token: u32, d: usize) -> f64 {
    let (_, g) = grads.iter().find(|(n, _)| n == "encoder.embed.table").unwrap();
    g[token as usize * d..(token as usize + 1) * d].iter().map(|v| v.abs()).sum()
}
