//! The two-domain network set.
//!
//! Each domain owns a content encoder, a style encoder, a decoder, a latent
//! discriminator and a bridge into its content encoder. Token and position
//! embeddings and the style classifier are shared. Content and style codes
//! are combined by [`compose`], which swaps the per-channel statistics of the
//! content code for the style code.

use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, BOS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

mod checkpoint;
mod init;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
pub(crate) use init::uniform as init_uniform;

/// Floor applied to the content code's per-channel standard deviation.
pub const STD_EPS: f64 = 1e-5;

const RESIDUAL_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of embeddings, hidden layers and the content/style codes.
    pub dim: usize,
    pub kernel_size: usize,
    /// Longest raw sentence (without BOS/EOS).
    pub max_len: usize,
    pub content_layers: usize,
    pub style_layers: usize,
    pub decoder_layers: usize,
    pub discriminator_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, dim: usize, max_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            dim,
            kernel_size: 3,
            max_len,
            content_layers: 3,
            style_layers: 3,
            decoder_layers: 4,
            discriminator_layers: 2,
            seed,
        }
    }

    /// Positions a framed sequence can occupy.
    pub fn max_positions(&self) -> usize {
        self.max_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.vocab_size <= crate::corpus::SPECIALS.len() {
            return bad("vocab_size must exceed the four special tokens");
        }
        if self.dim == 0 || self.max_len == 0 {
            return bad("dim and max_len must be positive");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if self.content_layers < 2 {
            return bad("the content encoder needs at least two layers for the bridge");
        }
        if self.style_layers == 0 || self.decoder_layers == 0 || self.discriminator_layers == 0 {
            return bad("layer counts must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, left: usize, right: usize) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, left, right)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentEncoder {
    pub layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleEncoder {
    pub layers: Vec<ConvLayer>,
    pub hidden: Linear,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub conv: ConvLayer,
    pub attn_in: Linear,
    pub attn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Second-last layer; its activations feed the bridge.
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub layers: Vec<ConvLayer>,
    pub head: Linear,
}

/// Two-layer MLP from decoder activations into a content encoder's
/// second-layer activation space.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleClassifier {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainNets {
    pub content: ContentEncoder,
    pub style: StyleEncoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    /// Maps the other domain's decoder activations into this domain's content encoder.
    pub bridge: Bridge,
}

/// Every learnable tensor of the model plus the architecture that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub domains: [DomainNets; 2],
    pub classifier: StyleClassifier,
}

/// Per-position content code `[m x d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCode {
    pub values: Tensor,
}

/// Target statistics `(mu, sigma)`, each `[d]`, with `sigma > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Content code carrying a style code's statistics, `[m x d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCode {
    pub values: Tensor,
}

/// Graph handles of a style code.
#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ContentVars {
    pub code: Var,
    /// Output of the second convolution block.
    pub second_layer: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// `[t x d]` second-last layer activations.
    pub hidden: Var,
    /// `[t x V]` next-token log-probabilities.
    pub log_probs: Var,
}

struct Builder {
    store: ParamStore,
    seed: u64,
}

impl Builder {
    fn weight(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let t = init::uniform(self.seed, &name, rows, cols, fan_in);
        self.store.add(name, t)
    }

    fn bias(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![n]))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), fan_in, fan_out, fan_in),
            b: self.bias(format!("{name}.b"), fan_out),
        }
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> ConvLayer {
        ConvLayer {
            w: self.weight(format!("{name}.w"), k * cin, cout, k * cin),
            b: self.bias(format!("{name}.b"), cout),
        }
    }
}

impl ModelParams {
    /// Fresh parameters. Weights are uniform in `±1/sqrt(fan_in)`, biases zero.
    /// Both domains start from identical weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, k, v) = (config.dim, config.kernel_size, config.vocab_size);
        let mut b = Builder {
            store: ParamStore::new(),
            seed: config.seed,
        };
        let token_embedding = b.weight("embed.tokens".into(), v, d, d);
        let position_embedding = b.weight("embed.positions".into(), config.max_positions(), d, d);
        let mut nets = Vec::with_capacity(2);
        for dom in ["d1", "d2"] {
            let content = ContentEncoder {
                layers: (0..config.content_layers)
                    .map(|l| b.conv(&format!("{dom}.content.conv{l}"), k, d, 2 * d))
                    .collect(),
            };
            let style = StyleEncoder {
                layers: (0..config.style_layers)
                    .map(|l| b.conv(&format!("{dom}.style.conv{l}"), k, d, 2 * d))
                    .collect(),
                hidden: b.linear(&format!("{dom}.style.mlp0"), d, d),
                head: b.linear(&format!("{dom}.style.mlp1"), d, 2 * d),
            };
            let decoder = Decoder {
                layers: (0..config.decoder_layers)
                    .map(|l| DecoderLayer {
                        conv: b.conv(&format!("{dom}.decoder.conv{l}"), k, d, 2 * d),
                        attn_in: b.linear(&format!("{dom}.decoder.attn_in{l}"), d, d),
                        attn_out: b.linear(&format!("{dom}.decoder.attn_out{l}"), d, d),
                    })
                    .collect(),
                hidden: b.linear(&format!("{dom}.decoder.fc_hidden"), d, d),
                out: b.linear(&format!("{dom}.decoder.fc_out"), d, v),
            };
            let discriminator = Discriminator {
                layers: (0..config.discriminator_layers)
                    .map(|l| b.conv(&format!("{dom}.disc.conv{l}"), k, d, d))
                    .collect(),
                head: b.linear(&format!("{dom}.disc.head"), d, 1),
            };
            let bridge = Bridge {
                hidden: b.linear(&format!("{dom}.bridge.mlp0"), d, d),
                out: b.linear(&format!("{dom}.bridge.mlp1"), d, d),
            };
            nets.push(DomainNets {
                content,
                style,
                decoder,
                discriminator,
                bridge,
            });
        }
        let classifier = StyleClassifier {
            hidden: b.linear("classifier.mlp0", 2 * d, d),
            out: b.linear("classifier.mlp1", d, 2),
        };
        let d2 = nets.pop().unwrap();
        let d1 = nets.pop().unwrap();
        Ok(ModelParams {
            config,
            store: b.store,
            token_embedding,
            position_embedding,
            domains: [d1, d2],
            classifier,
        })
    }

    pub fn nets(&self, domain: Domain) -> &DomainNets {
        &self.domains[domain.index()]
    }

    /// Whether a parameter belongs to one of the latent discriminators.
    pub fn is_discriminator_param(&self, id: ParamId) -> bool {
        self.domains.iter().any(|n| {
            n.discriminator.head.w == id
                || n.discriminator.head.b == id
                || n.discriminator.layers.iter().any(|l| l.w == id || l.b == id)
        })
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if ids.len() > self.config.max_positions() {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds {} positions",
                ids.len(),
                self.config.max_positions()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Token plus position embeddings, `[m x d]`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.check_tokens(ids)?;
        let tok = g.param(&self.store, self.token_embedding);
        let pos = g.param(&self.store, self.position_embedding);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let a = g.embed(tok, ids)?;
        let b = g.embed(pos, &positions)?;
        g.add(a, b)
    }

    fn conv_block(
        &self,
        g: &mut Graph,
        layer: &ConvLayer,
        x: Var,
        pool: Pool,
    ) -> Result<Var> {
        let k = self.config.kernel_size;
        let pad = (k - 1) / 2;
        let a = layer.forward(g, &self.store, x, pad, pad)?;
        let h = g.glu(a)?;
        let h = match pool {
            Pool::Avg => g.avg_pool(h, k)?,
            Pool::Max => g.max_pool(h, k)?,
        };
        let y = g.add(h, x)?;
        g.scale(y, RESIDUAL_SCALE)
    }

    /// Content encoder over framed token ids; output keeps one position per token.
    pub fn content_forward(&self, g: &mut Graph, domain: Domain, ids: &[usize]) -> Result<ContentVars> {
        let mut x = self.embed(g, ids)?;
        let mut second_layer = x;
        for (l, layer) in self.nets(domain).content.layers.iter().enumerate() {
            x = self.conv_block(g, layer, x, Pool::Avg)?;
            if l == 1 {
                second_layer = x;
            }
        }
        Ok(ContentVars {
            code: x,
            second_layer,
        })
    }

    /// Runs the content encoder's blocks after the second one on injected activations.
    pub fn content_from_second_layer(&self, g: &mut Graph, domain: Domain, h: Var) -> Result<Var> {
        let mut x = h;
        for layer in &self.nets(domain).content.layers[2..] {
            x = self.conv_block(g, layer, x, Pool::Avg)?;
        }
        Ok(x)
    }

    pub fn style_forward(&self, g: &mut Graph, domain: Domain, ids: &[usize]) -> Result<StyleVars> {
        let nets = self.nets(domain);
        let d = self.config.dim;
        let mut x = self.embed(g, ids)?;
        for layer in &nets.style.layers {
            x = self.conv_block(g, layer, x, Pool::Max)?;
        }
        let pooled = g.mean_over_positions(x)?;
        let pooled = g.reshape(pooled, vec![1, d])?;
        let h = nets.style.hidden.forward(g, &self.store, pooled)?;
        let h = g.tanh(h)?;
        let out = nets.style.head.forward(g, &self.store, h)?;
        let out = g.reshape(out, vec![2 * d])?;
        let mu = g.slice_cols(out, 0, d)?;
        let raw = g.slice_cols(out, d, d)?;
        let sigma = g.softplus(raw)?;
        Ok(StyleVars { mu, sigma })
    }

    /// Causal decoder over `prefix` (starting with BOS), attending over `fused`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        domain: Domain,
        fused: Var,
        prefix: &[usize],
    ) -> Result<DecoderVars> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Data("decoder prefix must start with BOS".into()));
        }
        let nets = self.nets(domain);
        let k = self.config.kernel_size;
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let e = self.embed(g, prefix)?;
        let mut x = e;
        for layer in &nets.decoder.layers {
            let a = layer.conv.forward(g, &self.store, x, k - 1, 0)?;
            let h = g.glu(a)?;
            let q = layer.attn_in.forward(g, &self.store, h)?;
            let q = g.add(q, e)?;
            let q = g.scale(q, RESIDUAL_SCALE * scale)?;
            let scores = g.matmul_bt(q, fused)?;
            let attn = g.softmax(scores)?;
            let ctx = g.matmul(attn, fused)?;
            let ctx = layer.attn_out.forward(g, &self.store, ctx)?;
            let h = g.add(h, ctx)?;
            let h = g.scale(h, RESIDUAL_SCALE)?;
            let y = g.add(h, x)?;
            x = g.scale(y, RESIDUAL_SCALE)?;
        }
        let hidden = nets.decoder.hidden.forward(g, &self.store, x)?;
        let logits = nets.decoder.out.forward(g, &self.store, hidden)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(DecoderVars { hidden, log_probs })
    }

    /// Probability that `fused` came from this domain's reconstruction stream.
    pub fn discriminator_forward(&self, g: &mut Graph, domain: Domain, fused: Var) -> Result<Var> {
        let nets = self.nets(domain);
        let pad = (self.config.kernel_size - 1) / 2;
        let mut x = fused;
        for layer in &nets.discriminator.layers {
            let a = layer.forward(g, &self.store, x, pad, pad)?;
            x = g.tanh(a)?;
        }
        let pooled = g.mean_over_positions(x)?;
        let pooled = g.reshape(pooled, vec![1, self.config.dim])?;
        let logit = nets.discriminator.head.forward(g, &self.store, pooled)?;
        let p = g.sigmoid(logit)?;
        g.reshape(p, vec![])
    }

    /// Log-probabilities `[1 x 2]` over the two domains from `concat(mu, sigma)`.
    pub fn classifier_forward(&self, g: &mut Graph, style: StyleVars) -> Result<Var> {
        let c = &self.classifier;
        let x = g.concat(&[style.mu, style.sigma])?;
        let x = g.reshape(x, vec![1, 2 * self.config.dim])?;
        let h = c.hidden.forward(g, &self.store, x)?;
        let h = g.tanh(h)?;
        let logits = c.out.forward(g, &self.store, h)?;
        g.log_softmax(logits)
    }

    /// Bridge into `target`'s content encoder: `W2 tanh(W1 h + b1) + b2` per position.
    pub fn bridge_forward(&self, g: &mut Graph, target: Domain, hidden: Var) -> Result<Var> {
        let br = &self.nets(target).bridge;
        let h = br.hidden.forward(g, &self.store, hidden)?;
        let h = g.tanh(h)?;
        br.out.forward(g, &self.store, h)
    }

    pub fn encode_content(&self, domain: Domain, tokens: &[usize]) -> Result<ContentCode> {
        let mut g = Graph::new();
        let c = self.content_forward(&mut g, domain, tokens)?;
        Ok(ContentCode {
            values: g.value(c.code).clone(),
        })
    }

    pub fn encode_style(&self, domain: Domain, tokens: &[usize]) -> Result<StyleCode> {
        let mut g = Graph::new();
        let s = self.style_forward(&mut g, domain, tokens)?;
        Ok(StyleCode {
            mu: g.value(s.mu).clone(),
            sigma: g.value(s.sigma).clone(),
        })
    }

    /// Next-token distribution after `prefix`.
    pub fn decode_step(&self, domain: Domain, fused: &FusedCode, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let z = g.constant(fused.values.clone());
        let out = self.decoder_forward(&mut g, domain, z, prefix)?;
        let lp = g.value(out.log_probs);
        Ok(lp.row(lp.rows() - 1).iter().map(|v| v.exp()).collect())
    }

    pub fn discriminate(&self, domain: Domain, fused: &FusedCode) -> Result<f64> {
        let mut g = Graph::new();
        let z = g.constant(fused.values.clone());
        let p = self.discriminator_forward(&mut g, domain, z)?;
        Ok(g.item(p))
    }

    /// Probabilities over `[domain one, domain two]`.
    pub fn classify_style(&self, style: &StyleCode) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let s = StyleVars {
            mu: g.constant(style.mu.clone()),
            sigma: g.constant(style.sigma.clone()),
        };
        let lp = self.classifier_forward(&mut g, s)?;
        let v = g.value(lp).data();
        Ok([v[0].exp(), v[1].exp()])
    }

    pub fn bridge(&self, target: Domain, decoder_hidden: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = g.constant(decoder_hidden.clone());
        let out = self.bridge_forward(&mut g, target, h)?;
        Ok(g.value(out).clone())
    }

    /// Greedy tokens from `fused` for exactly `steps` steps (EOS does not stop it).
    /// Returns the decoder input `[BOS, y1, .., y_{steps-1}]`.
    pub fn greedy_prefix(&self, domain: Domain, fused: &Tensor, steps: usize) -> Result<Vec<usize>> {
        let mut prefix = vec![BOS];
        let fused = FusedCode {
            values: fused.clone(),
        };
        while prefix.len() < steps {
            let p = self.decode_step(domain, &fused, &prefix)?;
            prefix.push(argmax(&p));
        }
        Ok(prefix)
    }
}

#[derive(Debug, Clone, Copy)]
enum Pool {
    Avg,
    Max,
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// `z^k = sigma_s * (c^k - mu(c)) / max(sigma(c), eps) + mu_s` on the graph.
pub fn compose_vars(g: &mut Graph, content: Var, style: StyleVars) -> Result<Var> {
    let mu = g.mean_over_positions(content)?;
    let sd = g.std_over_positions(content, STD_EPS)?;
    let centred = g.sub_row(content, mu)?;
    let normed = g.div_row(centred, sd)?;
    let scaled = g.mul_row(normed, style.sigma)?;
    g.add_row(scaled, style.mu)
}

/// Replaces the content code's per-channel statistics with the style code's.
pub fn compose(content: &ContentCode, style: &StyleCode) -> Result<FusedCode> {
    let d = content.values.cols();
    if style.mu.numel() != d || style.sigma.numel() != d {
        return Err(Error::Shape {
            op: "compose",
            lhs: content.values.shape().to_vec(),
            rhs: style.mu.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let c = g.constant(content.values.clone());
    let s = StyleVars {
        mu: g.constant(style.mu.clone()),
        sigma: g.constant(style.sigma.clone()),
    };
    let z = compose_vars(&mut g, c, s)?;
    Ok(FusedCode {
        values: g.value(z).clone(),
    })
}
