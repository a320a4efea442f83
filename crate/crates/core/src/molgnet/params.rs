use rand::Rng;

use super::MolGNetConfig;
use crate::numcore::Tensor;
use crate::params::{param_struct, take_named, ParamTree};
use crate::Result;

const EMBED_STD: f64 = 0.02;

param_struct!(
    /// Input embedding tables. `segment` rows are (first, second, collect).
    EmbedParams {
        atom => "atom",
        bond => "bond",
        segment => "segment",
        virtual_edge => "virtual_edge",
    }
);

param_struct!(
    /// Weights of one MolGNet layer, shared across its T steps. Matrices are
    /// stored `out x in`.
    LayerParams {
        wq => "attn.wq",
        wk => "attn.wk",
        wv => "attn.wv",
        wm => "attn.wm",
        w1 => "ffn.w1",
        b1 => "ffn.b1",
        w2 => "ffn.w2",
        b2 => "ffn.b2",
        norm1_gamma => "norm1.gamma",
        norm1_beta => "norm1.beta",
        norm2_gamma => "norm2.gamma",
        norm2_beta => "norm2.beta",
        w_mr => "gru.w_mr",
        w_xr => "gru.w_xr",
        w_mu => "gru.w_mu",
        w_xu => "gru.w_xu",
        w_in => "gru.w_in",
        w_hn => "gru.w_hn",
        b_mr => "gru.b_mr",
        b_hr => "gru.b_hr",
        b_mu => "gru.b_mu",
        b_hu => "gru.b_hu",
        b_in => "gru.b_in",
        b_hn => "gru.b_hn",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct MolGNetParams<T = Tensor> {
    pub embed: EmbedParams<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> MolGNetParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> MolGNetParams<U> {
        MolGNetParams {
            embed: self.embed.map(&mut f),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
        }
    }
}

impl<T> ParamTree<T> for MolGNetParams<T> {
    fn visit(&self, f: &mut dyn FnMut(String, &T)) {
        self.embed.for_each(|k, t| f(format!("embed.{k}"), t));
        for (n, layer) in self.layers.iter().enumerate() {
            layer.for_each(|k, t| f(format!("layer{n}.{k}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.embed.for_each_mut(|k, t| f(format!("embed.{k}"), t));
        for (n, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(|k, t| f(format!("layer{n}.{k}"), t));
        }
    }

    fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.embed.fields_mut();
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out
    }
}

fn layer_shape(key: &str, c: &MolGNetConfig) -> Vec<usize> {
    let (d, ff) = (c.hidden, c.ffn);
    match key {
        "ffn.w1" => vec![ff, d],
        "ffn.b1" => vec![ff],
        "ffn.w2" => vec![d, ff],
        k if k.starts_with("gru.b") || k.ends_with("b2") || k.starts_with("norm") => vec![d],
        _ => vec![d, d],
    }
}

fn embed_shape(key: &str, c: &MolGNetConfig) -> Vec<usize> {
    let rows = match key {
        "atom" => c.atom_vocab,
        "bond" => c.bond_vocab,
        "segment" => c.segment_vocab,
        _ => 1,
    };
    vec![rows, c.hidden]
}

impl MolGNetParams<Tensor> {
    /// Glorot-uniform matrices, zero biases, unit layer-norm gains, and
    /// N(0, 0.02) embeddings.
    pub fn init<R: Rng + ?Sized>(config: &MolGNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = EmbedParams::layout().map(|k, _| Tensor::normal(&embed_shape(k, config), EMBED_STD, rng));
        let template = LayerParams::layout();
        let layers = (0..config.n_layers)
            .map(|_| {
                template.map(|k, _| {
                    let shape = layer_shape(k, config);
                    if k.ends_with("gamma") {
                        Tensor::ones(&shape)
                    } else if shape.len() == 1 {
                        Tensor::zeros(&shape)
                    } else {
                        Tensor::glorot_uniform(shape[0], shape[1], rng)
                    }
                })
            })
            .collect();
        Ok(Self { embed, layers })
    }

    /// Rebuilds parameters from named tensors, rejecting missing names or
    /// shapes that disagree with `config`.
    pub fn from_named(config: &MolGNetConfig, named: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let embed =
            EmbedParams::layout().try_map(|k, _| take_named(named, &format!("embed.{k}"), &embed_shape(k, config)))?;
        let layers = (0..config.n_layers)
            .map(|n| {
                LayerParams::layout()
                    .try_map(|k, _| take_named(named, &format!("layer{n}.{k}"), &layer_shape(k, config)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, layers })
    }
}
