//! Multi-input multi-output classifier: M member-specific first blocks and
//! last-block/head pairs around a shared trunk.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, TensorId};

use super::{
    padding_mask, BlockParams, Dropout, EmbeddingParams, EncoderConfig, HeadParams, Lease,
    Prediction, PAD_ID,
};

/// MIMO transformer: member m runs its own first block over its own input
/// embedding, the member outputs are averaged into a shared trunk, and M
/// member-specific last blocks and heads produce M predictions.
pub struct MimoClassifier {
    pub config: EncoderConfig,
    pub members: usize,
    pub params: ParamSet,
    embedding: EmbeddingParams,
    first: Vec<BlockParams>,
    trunk: Vec<BlockParams>,
    last: Vec<BlockParams>,
    heads: Vec<HeadParams>,
    shared_head: bool,
}

impl MimoClassifier {
    pub fn new(config: EncoderConfig, members: usize, seed: u64) -> Self {
        Self::with_shared_head(config, members, false, seed)
    }

    /// `shared_head = true` collapses the M output heads into one shared
    /// head (the member last blocks stay independent).
    pub fn with_shared_head(
        config: EncoderConfig,
        members: usize,
        shared_head: bool,
        seed: u64,
    ) -> Self {
        config.validate().expect("invalid encoder config");
        assert!(members >= 1, "MIMO needs at least one member");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let embedding = EmbeddingParams::init(&mut params, &config, &mut rng);
        let first = (0..members)
            .map(|m| BlockParams::init(&mut params, &format!("member.{m}.first"), &config, &mut rng))
            .collect();
        let trunk = (0..config.num_blocks.saturating_sub(2))
            .map(|i| BlockParams::init(&mut params, &format!("trunk.{i}"), &config, &mut rng))
            .collect();
        let last = (0..members)
            .map(|m| BlockParams::init(&mut params, &format!("member.{m}.last"), &config, &mut rng))
            .collect();
        let head_count = if shared_head { 1 } else { members };
        let heads = (0..head_count)
            .map(|m| HeadParams::init(&mut params, &format!("member.{m}."), &config, &mut rng))
            .collect();
        MimoClassifier {
            config,
            members,
            params,
            embedding,
            first,
            trunk,
            last,
            heads,
            shared_head,
        }
    }

    fn head_for(&self, member: usize) -> &HeadParams {
        if self.shared_head {
            &self.heads[0]
        } else {
            &self.heads[member]
        }
    }

    /// Member probability vectors plus their average, for M token
    /// sequences (one per member). Sequences are padded here to a common
    /// length; the trunk attends over the union of member content masks.
    pub fn forward_members_on_tape(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        member_tokens: &[Vec<usize>],
        dropout: &mut Dropout,
    ) -> (Vec<TensorId>, TensorId) {
        assert_eq!(
            member_tokens.len(),
            self.members,
            "MIMO expects {} member inputs, got {}",
            self.members,
            member_tokens.len()
        );
        let common_len = member_tokens.iter().map(|t| t.len()).max().expect("at least one member");
        let padded: Vec<Vec<usize>> = member_tokens
            .iter()
            .map(|t| {
                let mut p = t.clone();
                p.resize(common_len, PAD_ID);
                p
            })
            .collect();

        let mut union = vec![false; common_len];
        let mut firsts = Vec::with_capacity(self.members);
        for (m, tokens) in padded.iter().enumerate() {
            let mask = padding_mask(tokens);
            for (u, &b) in union.iter_mut().zip(mask.iter()) {
                *u |= b;
            }
            let emb = self.embedding.forward(tape, lease, tokens, &self.config, dropout);
            firsts.push(self.first[m].forward(tape, lease, emb, &mask, &self.config, dropout));
        }
        let union = Rc::new(union);

        let mut x = tape.mean_of(&firsts);
        for block in &self.trunk {
            x = block.forward(tape, lease, x, &union, &self.config, dropout);
        }

        let mut member_probs = Vec::with_capacity(self.members);
        for m in 0..self.members {
            let out = self.last[m].forward(tape, lease, x, &union, &self.config, dropout);
            let pooled = tape.select_row(out, 0);
            member_probs.push(self.head_for(m).forward(tape, lease, pooled));
        }
        let avg = tape.mean_of(&member_probs);
        (member_probs, avg)
    }

    /// Member pooled embeddings (classification-token vector after each
    /// member's last block), for the MixUp-on-pooled-embedding path.
    pub fn encode_members_on_tape(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        member_tokens: &[Vec<usize>],
        dropout: &mut Dropout,
    ) -> Vec<TensorId> {
        assert_eq!(member_tokens.len(), self.members);
        let common_len = member_tokens.iter().map(|t| t.len()).max().expect("at least one member");
        let padded: Vec<Vec<usize>> = member_tokens
            .iter()
            .map(|t| {
                let mut p = t.clone();
                p.resize(common_len, PAD_ID);
                p
            })
            .collect();
        let mut union = vec![false; common_len];
        let mut firsts = Vec::with_capacity(self.members);
        for (m, tokens) in padded.iter().enumerate() {
            let mask = padding_mask(tokens);
            for (u, &b) in union.iter_mut().zip(mask.iter()) {
                *u |= b;
            }
            let emb = self.embedding.forward(tape, lease, tokens, &self.config, dropout);
            firsts.push(self.first[m].forward(tape, lease, emb, &mask, &self.config, dropout));
        }
        let union = Rc::new(union);
        let mut x = tape.mean_of(&firsts);
        for block in &self.trunk {
            x = block.forward(tape, lease, x, &union, &self.config, dropout);
        }
        (0..self.members)
            .map(|m| {
                let out = self.last[m].forward(tape, lease, x, &union, &self.config, dropout);
                tape.select_row(out, 0)
            })
            .collect()
    }

    /// Member head over a pooled embedding.
    pub fn classify_member_on_tape(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        member: usize,
        pooled: TensorId,
    ) -> TensorId {
        self.head_for(member).forward(tape, lease, pooled)
    }

    /// Test-time prediction: the single input is repeated to all members
    /// and the member outputs are averaged.
    pub fn predict(&self, tokens: &[usize]) -> (Vec<Prediction>, Prediction) {
        let inputs = vec![tokens.to_vec(); self.members];
        let mut tape = Tape::new();
        let lease = Lease::new(&mut tape, &self.params);
        let (member_ids, avg_id) =
            self.forward_members_on_tape(&mut tape, &lease, &inputs, &mut Dropout::Off);
        let members = member_ids
            .iter()
            .map(|&id| Prediction::from_probs(tape.value(id).data.clone()))
            .collect();
        let avg = Prediction::from_probs(tape.value(avg_id).data.clone());
        (members, avg)
    }

    /// Scope prefix of the blocks feeding the classification heads.
    pub fn penultimate_scope(&self) -> impl Fn(&str) -> bool {
        |name: &str| name.starts_with("member.") && name.contains(".last.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, TransformerClassifier, CLS_ID};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            max_seq_len: 12,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_blocks: 3,
            dropout_rate: 0.1,
            num_classes: 3,
            activation: Activation::Gelu,
        }
    }

    /// Copy single-tower weights into an M=1 MIMO so the two computations
    /// can be compared on identical parameters.
    fn copy_single_into_mimo(single: &TransformerClassifier, mimo: &mut MimoClassifier) {
        let l = single.config.num_blocks;
        for p in single.params.iter() {
            let target = if let Some(rest) = p.name.strip_prefix("blocks.") {
                let (idx, suffix) = rest.split_once('.').unwrap();
                let i: usize = idx.parse().unwrap();
                if i == 0 {
                    format!("member.0.first.{suffix}")
                } else if i == l - 1 {
                    format!("member.0.last.{suffix}")
                } else {
                    format!("trunk.{}.{suffix}", i - 1)
                }
            } else if p.name.starts_with("pooler.") || p.name.starts_with("head.") {
                format!("member.0.{}", p.name)
            } else {
                p.name.clone()
            };
            let id = mimo
                .params
                .id_by_name(&target)
                .unwrap_or_else(|| panic!("missing target param {target}"));
            mimo.params.get_mut(id).value = p.value.clone();
        }
    }

    #[test]
    fn m1_reduces_to_single_tower() {
        let cfg = tiny_config();
        let single = TransformerClassifier::new(cfg.clone(), 5);
        let mut mimo = MimoClassifier::new(cfg, 1, 99);
        copy_single_into_mimo(&single, &mut mimo);
        for tokens in [vec![CLS_ID, 4, 7], vec![CLS_ID, 3, 3, 9, 12]] {
            let expected = single.forward(&tokens);
            let (_, avg) = mimo.predict(&tokens);
            for (a, b) in expected.probs.iter().zip(&avg.probs) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn averaged_prediction_sums_to_one() {
        let mimo = MimoClassifier::new(tiny_config(), 3, 21);
        let (members, avg) = mimo.predict(&[CLS_ID, 5, 9, 2]);
        assert_eq!(members.len(), 3);
        let sum: f64 = avg.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // average equals the arithmetic mean of members
        for k in 0..3 {
            let mean: f64 = members.iter().map(|m| m.probs[k]).sum::<f64>() / 3.0;
            assert!((mean - avg.probs[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_member_weights_mean_zero_disagreement() {
        let mut mimo = MimoClassifier::new(tiny_config(), 2, 33);
        // overwrite member 1 with member 0's weights
        let names: Vec<String> = mimo
            .params
            .iter()
            .filter(|p| p.name.starts_with("member.0."))
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let twin = name.replacen("member.0.", "member.1.", 1);
            let src = mimo.params.by_name(&name).unwrap().value.clone();
            let id = mimo.params.id_by_name(&twin).unwrap();
            mimo.params.get_mut(id).value = src;
        }
        let (members, _) = mimo.predict(&[CLS_ID, 8, 3]);
        assert_eq!(members[0].probs, members[1].probs);
    }

    #[test]
    #[should_panic(expected = "member inputs")]
    fn wrong_member_input_count_panics() {
        let mimo = MimoClassifier::new(tiny_config(), 2, 1);
        let mut tape = Tape::new();
        let lease = Lease::new(&mut tape, &mimo.params);
        mimo.forward_members_on_tape(
            &mut tape,
            &lease,
            &[vec![CLS_ID, 4]],
            &mut Dropout::Off,
        );
    }

    #[test]
    fn shared_head_has_single_head_param_group() {
        let shared = MimoClassifier::with_shared_head(tiny_config(), 3, true, 1);
        assert!(shared.params.by_name("member.1.head.w").is_none());
        assert!(shared.params.by_name("member.0.head.w").is_some());
        let (members, _) = shared.predict(&[CLS_ID, 4, 9]);
        assert_eq!(members.len(), 3);
    }
}
