use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CoreError, Result};
use crate::numeric;

use super::vocab::{TokenId, BOS, EOS, PAD};

/// Architecture hyperparameters of the fixed-context LM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            context_len: 16,
            embed_dim: 32,
            hidden_dim: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 || self.context_len < 1 || self.embed_dim < 1 || self.hidden_dim < 1
        {
            return Err(CoreError::Config(format!(
                "all model dimensions must be at least 1 (and vocab at least 4): {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (v, c, d, h) = (
            self.vocab_size,
            self.context_len,
            self.embed_dim,
            self.hidden_dim,
        );
        v * d + c * d + (c * d) * h + h + h * v + v
    }
}

/// Fixed-context MLP language model over character tokens.
///
/// The context window is embedded per slot (token embedding plus position
/// embedding), concatenated, passed through one tanh hidden layer, and
/// projected to vocabulary logits.
#[derive(Debug, Clone)]
pub struct LmModel {
    config: LmConfig,
    tok_embed: Tensor,
    pos_embed: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Tape handles for the six parameter leaves of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LmModel {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (v, c, d, h) = (
            config.vocab_size,
            config.context_len,
            config.embed_dim,
            config.hidden_dim,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let tok_embed = Tensor::param(vec![v, d], draw(v * d, 0.1))?;
        let pos_embed = Tensor::param(vec![c, d], draw(c * d, 0.1))?;
        let w1_scale = 1.0 / ((c * d) as f64).sqrt();
        let w1 = Tensor::param(vec![c * d, h], draw(c * d * h, w1_scale))?;
        let mut b1 = Tensor::zeros(vec![h]);
        b1.set_requires_grad(true);
        let w2_scale = 1.0 / (h as f64).sqrt();
        let w2 = Tensor::param(vec![h, v], draw(h * v, w2_scale))?;
        let mut b2 = Tensor::zeros(vec![v]);
        b2.set_requires_grad(true);
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    /// Parameters in declared order; this order is the checkpoint layout.
    pub fn params(&self) -> [&Tensor; 6] {
        [
            &self.tok_embed,
            &self.pos_embed,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.tok_embed,
            &mut self.pos_embed,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub const PARAM_NAMES: [&'static str; 6] =
        ["tok_embed", "pos_embed", "w1", "b1", "w2", "b2"];

    /// Records the six parameter leaves on a fresh tape.
    pub fn leaves(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            tok_embed: tape.leaf(&self.tok_embed),
            pos_embed: tape.leaf(&self.pos_embed),
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    /// Differentiable batched forward: one logit row per context.
    /// Contexts must already be left-padded to `context_len`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        contexts: &[Vec<TokenId>],
    ) -> Result<Var> {
        let x = tape.embed_concat(vars.tok_embed, vars.pos_embed, contexts)?;
        let h_lin = tape.matmul(x, vars.w1)?;
        let h_aff = tape.add_row(h_lin, vars.b1)?;
        let h_act = tape.tanh(h_aff);
        let logits_lin = tape.matmul(h_act, vars.w2)?;
        tape.add_row(logits_lin, vars.b2)
    }

    /// Accumulates the tape gradients of one backward pass into the
    /// parameters' gradient slots. Leaves untouched by the loss get zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ModelVars) -> Result<()> {
        let ids = [
            vars.tok_embed,
            vars.pos_embed,
            vars.w1,
            vars.b1,
            vars.w2,
            vars.b2,
        ];
        for (param, var) in self.params_mut().into_iter().zip(ids) {
            let g = tape.grad_or_zeros(var)?;
            param.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Left-pads (or truncates to) the last `context_len` tokens.
    pub fn pad_context(&self, context: &[TokenId]) -> Vec<TokenId> {
        let c = self.config.context_len;
        let tail: Vec<TokenId> = context
            .iter()
            .copied()
            .skip(context.len().saturating_sub(c))
            .collect();
        let mut padded = vec![PAD; c - tail.len()];
        padded.extend(tail);
        padded
    }

    /// Next-token logits for one context of length at most `context_len`,
    /// computed without a tape. Deterministic for fixed parameters.
    pub fn forward_logits(&self, context: &[TokenId]) -> Result<Tensor> {
        if context.len() > self.config.context_len {
            return Err(CoreError::Config(format!(
                "context of length {} exceeds the model context window {}",
                context.len(),
                self.config.context_len
            )));
        }
        if let Some(&bad) = context.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(CoreError::Vocabulary {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        let padded = self.pad_context(context);
        let (c, d, h, v) = (
            self.config.context_len,
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.vocab_size,
        );
        let mut x = vec![0.0; c * d];
        for (slot, &t) in padded.iter().enumerate() {
            let te = &self.tok_embed.data()[t * d..(t + 1) * d];
            let pe = &self.pos_embed.data()[slot * d..(slot + 1) * d];
            let dst = &mut x[slot * d..(slot + 1) * d];
            for ((o, &a), &b) in dst.iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        let mut hidden = self.b1.data().to_vec();
        let w1 = self.w1.data();
        for (k, &xk) in x.iter().enumerate() {
            let row = &w1[k * h..(k + 1) * h];
            for (acc, &w) in hidden.iter_mut().zip(row) {
                *acc += xk * w;
            }
        }
        for vh in hidden.iter_mut() {
            *vh = vh.tanh();
        }
        let mut logits = self.b2.data().to_vec();
        let w2 = self.w2.data();
        for (k, &hk) in hidden.iter().enumerate() {
            let row = &w2[k * v..(k + 1) * v];
            for (acc, &w) in logits.iter_mut().zip(row) {
                *acc += hk * w;
            }
        }
        Tensor::logits(vec![v], logits)
    }

    /// Mean negative log-likelihood of the masked target positions given the
    /// prompt, teacher-forcing the true targets. Computed without a tape.
    pub fn nll_loss(&self, prompt: &[TokenId], target: &[TokenId], mask: &[bool]) -> Result<f64> {
        if target.len() != mask.len() {
            return Err(CoreError::DimensionMismatch {
                left: vec![target.len()],
                right: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(CoreError::EmptyLoss);
        }
        let mut seq = vec![BOS];
        seq.extend_from_slice(prompt);
        let mut total = 0.0;
        let mut count = 0usize;
        for (t, (&tok, &m)) in target.iter().zip(mask).enumerate() {
            if m {
                let logits = self.forward_logits(&self.pad_context(&seq))?;
                let logp = numeric::log_softmax(logits.data())?;
                if tok >= logp.len() {
                    return Err(CoreError::Vocabulary {
                        id: tok,
                        vocab: logp.len(),
                    });
                }
                total -= logp[tok];
                count += 1;
            }
            seq.push(target[t]);
        }
        Ok(total / count as f64)
    }

    /// Greedy decoding: appends the argmax token (ties to the lowest id)
    /// until EOS or the budget is exhausted. EOS is not included in the
    /// returned sequence.
    pub fn generate_greedy(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(CoreError::EmptySequence("generation prompt".into()));
        }
        let mut seq = vec![BOS];
        seq.extend_from_slice(prompt);
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let logits = self.forward_logits(&self.pad_context(&seq))?;
            let next = numeric::argmax_lowest(logits.data());
            if next == EOS {
                break;
            }
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// SHA-256 over config and raw parameter bits; identifies a checkpoint.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        for (name, p) in Self::PARAM_NAMES.iter().zip(self.params()) {
            hasher.update(name.as_bytes());
            for &v in p.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Lifecycle stage recorded in checkpoint headers; downstream stages check it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrained,
    Memorized,
    Unlearned,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    stage: Stage,
    config: LmConfig,
}

#[derive(Serialize, Deserialize)]
struct ParamLine {
    name: String,
    shape: Vec<usize>,
    data_hex: String,
}

fn encode_bits(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        s.push_str(&format!("{:016x}", v.to_bits()));
    }
    s
}

fn decode_bits(s: &str) -> Result<Vec<f64>> {
    if s.len() % 16 != 0 {
        return Err(CoreError::CheckpointFormat(
            "parameter hex payload length not a multiple of 16".into(),
        ));
    }
    (0..s.len() / 16)
        .map(|i| {
            u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16)
                .map(f64::from_bits)
                .map_err(|e| CoreError::CheckpointFormat(format!("bad hex payload: {e}")))
        })
        .collect()
}

/// Serializes the checkpoint container: a JSON header line followed by one
/// JSON line per parameter with an exact bit-level payload.
pub fn checkpoint_to_string(model: &LmModel, stage: Stage) -> Result<String> {
    let mut out = String::new();
    let header = CheckpointHeader {
        format: "tinylm-ckpt".to_string(),
        version: 1,
        stage,
        config: *model.config(),
    };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for (name, p) in LmModel::PARAM_NAMES.iter().zip(model.params()) {
        let line = ParamLine {
            name: name.to_string(),
            shape: p.shape().to_vec(),
            data_hex: encode_bits(p.data()),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn checkpoint_from_str(text: &str) -> Result<(LmModel, Stage)> {
    let mut lines = text.lines();
    let header: CheckpointHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| CoreError::CheckpointFormat("empty checkpoint".into()))?,
    )?;
    if header.format != "tinylm-ckpt" || header.version != 1 {
        return Err(CoreError::CheckpointFormat(format!(
            "unsupported container {}@{}",
            header.format, header.version
        )));
    }
    let mut model = LmModel::new(header.config)?;
    for (expected, param) in LmModel::PARAM_NAMES.iter().zip(model.params_mut()) {
        let line: ParamLine = serde_json::from_str(lines.next().ok_or_else(|| {
            CoreError::CheckpointFormat(format!("missing parameter line {expected}"))
        })?)?;
        if line.name != *expected {
            return Err(CoreError::CheckpointFormat(format!(
                "parameter order mismatch: expected {expected}, found {}",
                line.name
            )));
        }
        if line.shape != param.shape() {
            return Err(CoreError::DimensionMismatch {
                left: line.shape,
                right: param.shape().to_vec(),
            });
        }
        let data = decode_bits(&line.data_hex)?;
        if data.len() != param.numel() {
            return Err(CoreError::CheckpointFormat(format!(
                "parameter {expected} payload length mismatch"
            )));
        }
        param.data_mut().copy_from_slice(&data);
    }
    Ok((model, header.stage))
}

/// Atomic checkpoint write: temp file in the same directory, then rename.
pub fn save_checkpoint(model: &LmModel, stage: Stage, path: &std::path::Path) -> Result<()> {
    let text = checkpoint_to_string(model, stage)?;
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into())
    ));
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(LmModel, Stage)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
