use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

use super::slot::{decode, encode, mlp, split_states, EncoderVars, HeadVars};
use super::{init_mlp, Bound, Mode, ModelConfig, ParamStore, SlotModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub specific: ModelConfig,
    pub general: ModelConfig,
    pub mlp_hidden_dim: usize,
    pub num_slot_labels: usize,
    pub dropout_rate: f64,
}

impl JointConfig {
    pub fn input_dim(&self) -> usize {
        self.specific.state_dim() + self.general.state_dim()
    }
}

/// Two frozen encoders whose per-step states are concatenated and fed to a
/// trainable output MLP (`out.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub config: JointConfig,
    pub specific: ParamStore,
    pub general: ParamStore,
    pub output: ParamStore,
}

impl JointModel {
    pub fn new(
        specific: &SlotModel,
        general: &SlotModel,
        num_slot_labels: usize,
        mlp_hidden_dim: usize,
        dropout_rate: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if specific.config.vocab_size != general.config.vocab_size {
            return Err(Error::Config(format!(
                "encoder vocabularies differ in size ({} vs {})",
                specific.config.vocab_size, general.config.vocab_size
            )));
        }
        if num_slot_labels == 0 || mlp_hidden_dim == 0 || !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config("invalid joint output layer configuration".into()));
        }
        let config = JointConfig {
            specific: specific.config.clone(),
            general: general.config.clone(),
            mlp_hidden_dim,
            num_slot_labels,
            dropout_rate,
        };
        let mut output = ParamStore::new();
        init_mlp(
            &mut output,
            "out",
            config.input_dim(),
            mlp_hidden_dim,
            num_slot_labels,
            rng,
        );
        let joint = JointModel {
            config,
            specific: specific.encoder_params(),
            general: general.encoder_params(),
            output,
        };
        joint.validate()?;
        Ok(joint)
    }

    /// Encoder widths must agree with the output layer's input width.
    pub fn validate(&self) -> Result<()> {
        let w1 = self.output.require("out.w1")?;
        let width = self.config.input_dim();
        let enc_width = |p: &ParamStore| -> Result<usize> { Ok(2 * p.require("fwd.w_h")?.shape()[0]) };
        let actual = enc_width(&self.specific)? + enc_width(&self.general)?;
        if w1.shape()[0] != width || actual != width {
            return Err(Error::Config(format!(
                "encoder state widths ({actual}) disagree with output layer input width ({})",
                w1.shape()[0]
            )));
        }
        Ok(())
    }

    /// Concatenated frozen encoder states per utterance, `[len, 4H]` each.
    pub fn encoder_states(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let h = self.frozen_states(&mut tape, batch)?;
        Ok(split_states(tape.value(h), batch))
    }

    fn frozen_states(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let mut rng = RngState::new(0);
        let mut parts = Vec::with_capacity(2);
        for enc in [&self.specific, &self.general] {
            let bound = enc.bind(tape, false);
            let vars = EncoderVars::from_bound(&bound)?;
            parts.push(encode(tape, &vars, batch, Mode::Eval, 0.0, &mut rng)?.h);
        }
        tape.concat_cols(&parts)
    }

    /// Output-layer scores from precomputed concatenated states
    /// (`[T_max·B, 4H]`, time-major).
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        out: &Bound,
        states: Var,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<Var> {
        let x = tape.dropout(states, self.config.dropout_rate, mode.is_train(), rng)?;
        let head = HeadVars::from_bound(out, "out")?;
        mlp(tape, &head, x)
    }

    /// Per-step slot distributions computed end to end from word ids.
    /// Encoder parameters enter the tape as constants.
    pub fn forward(&self, tape: &mut Tape, out: &Bound, batch: &Batch, mode: Mode, rng: &mut RngState) -> Result<Var> {
        let h = self.frozen_states(tape, batch)?;
        self.head_logits(tape, out, h, mode, rng)
    }

    pub fn distribution(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.output.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &out, batch, Mode::Eval, &mut RngState::new(0))?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        Ok(decode(&self.distribution(batch)?, batch))
    }

    /// SHA-256 of both frozen encoders.
    pub fn encoder_digest(&self) -> String {
        let mut all = ParamStore::new();
        all.extend_prefixed("specific", &self.specific);
        all.extend_prefixed("general", &self.general);
        all.digest()
    }
}

/// Time-major `[T_max·B, D]` tensor assembled from per-utterance state
/// matrices; padded rows are zero.
pub fn stack_states(states: &[&Tensor], t_max: usize) -> Tensor {
    let b = states.len();
    let d = states.first().map_or(0, |s| s.cols());
    let mut data = vec![0.0; t_max * b * d];
    for (row, s) in states.iter().enumerate() {
        for t in 0..s.rows() {
            let i = t * b + row;
            data[i * d..(i + 1) * d].copy_from_slice(s.row(t));
        }
    }
    Tensor::new(vec![t_max * b, d], data).expect("stacked shape")
}
