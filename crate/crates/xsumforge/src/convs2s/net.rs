//! Forward graph construction: topic-aware embeddings, the GLU convolution
//! stacks, per-layer attention over the encoder, and the loss head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelParams};
use crate::corpus::{EncodedPair, BOS, PAD};
use crate::diffcore::{NodeId, PadMode, Tape};

const LAYER_NORM_EPS: f64 = 1e-5;

/// An affine map bound on a tape: effective (weight-normed) weight plus bias.
#[derive(Clone, Copy)]
pub struct Projection {
    pub w: NodeId,
    pub b: NodeId,
}

/// Topic conditioning for one document: one row per source token plus the
/// document mixture. Rows are expected to be distributions over topics.
/// `TopicVectors::default()` is the empty conditioning used by `plain`.
#[derive(Clone, Copy, Default)]
pub struct TopicVectors<'a> {
    pub word_topics: &'a [Vec<f64>],
    pub doc_topic: &'a [f64],
}

/// Model weights registered on a tape: raw leaves for the optimizer, and the
/// effective per-layer weights the forward pass reads.
pub struct BoundParams {
    leaves: BTreeMap<String, NodeId>,
    pub word_emb: NodeId,
    pub pos_src: NodeId,
    pub pos_tgt: NodeId,
    pub enc_in: Projection,
    pub enc_convs: Vec<Projection>,
    pub enc_out: Projection,
    pub dec_in: Projection,
    pub dec_convs: Vec<Projection>,
    pub dec_attn_q: Vec<Projection>,
    pub dec_attn_o: Vec<Projection>,
    pub out: Projection,
}

impl BoundParams {
    /// Tape node for the raw parameter leaf `name`.
    pub fn leaf(&self, name: &str) -> NodeId {
        self.leaves[name]
    }

    pub fn leaves(&self) -> &BTreeMap<String, NodeId> {
        &self.leaves
    }
}

/// Final encoder states and the input embeddings they attend alongside.
#[derive(Clone, Copy)]
pub struct EncoderOut {
    pub z: NodeId,
    pub e: NodeId,
}

/// Per-step vocabulary logits plus one attention map per decoder layer.
pub struct DecoderOut {
    pub logits: NodeId,
    pub attention: Vec<NodeId>,
}

/// Registers every parameter on `tape` and materializes the weight-normed
/// effective weights.
pub fn bind(tape: &mut Tape, params: &ModelParams) -> Result<BoundParams, ModelError> {
    let mut leaves = BTreeMap::new();
    for (name, tensor) in params.tensors() {
        leaves.insert(name.clone(), tape.leaf(tensor));
    }
    fn linear(
        tape: &mut Tape,
        leaves: &BTreeMap<String, NodeId>,
        name: &str,
    ) -> Result<Projection, ModelError> {
        let w = tape
            .weight_norm_cols(leaves[format!("{name}.v").as_str()], leaves[format!("{name}.g").as_str()])?;
        Ok(Projection { w, b: leaves[format!("{name}.b").as_str()] })
    }
    fn conv(
        tape: &mut Tape,
        leaves: &BTreeMap<String, NodeId>,
        name: &str,
    ) -> Result<Projection, ModelError> {
        let w = tape
            .weight_norm_rows(leaves[format!("{name}.v").as_str()], leaves[format!("{name}.g").as_str()])?;
        Ok(Projection { w, b: leaves[format!("{name}.b").as_str()] })
    }
    let config = params.config();
    let enc_convs = (0..config.enc_layers)
        .map(|i| conv(tape, &leaves, &format!("enc.{i}.conv")))
        .collect::<Result<Vec<_>, _>>()?;
    let dec_convs = (0..config.dec_layers)
        .map(|i| conv(tape, &leaves, &format!("dec.{i}.conv")))
        .collect::<Result<Vec<_>, _>>()?;
    let dec_attn_q = (0..config.dec_layers)
        .map(|i| linear(tape, &leaves, &format!("dec.{i}.attn_q")))
        .collect::<Result<Vec<_>, _>>()?;
    let dec_attn_o = (0..config.dec_layers)
        .map(|i| linear(tape, &leaves, &format!("dec.{i}.attn_o")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BoundParams {
        word_emb: leaves["word_emb"],
        pos_src: leaves["pos_src"],
        pos_tgt: leaves["pos_tgt"],
        enc_in: linear(tape, &leaves, "enc.in")?,
        enc_convs,
        enc_out: linear(tape, &leaves, "enc.out")?,
        dec_in: linear(tape, &leaves, "dec.in")?,
        dec_convs,
        dec_attn_q,
        dec_attn_o,
        out: linear(tape, &leaves, "out")?,
        leaves,
    })
}

fn check_positions(positions: &[usize], max: usize) -> Result<(), ModelError> {
    match positions.iter().find(|&&p| p >= max) {
        Some(&pos) => Err(ModelError::PositionOverflow { pos, max }),
        None => Ok(()),
    }
}

fn check_width(row: &[f64], want: usize) -> Result<(), ModelError> {
    if row.len() != want {
        return Err(ModelError::TopicWidthMismatch { got: row.len(), want });
    }
    Ok(())
}

/// Embeds source tokens: word plus position embedding, with the topic block
/// appended for topic variants (the word topics, pointwise-times the document
/// topic for product variants). Applies embedding dropout.
#[allow(clippy::too_many_arguments)]
pub fn embed_source<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    ids: &[usize],
    positions: &[usize],
    topics: TopicVectors,
    training: bool,
    rng: &mut R,
) -> Result<NodeId, ModelError> {
    assert_eq!(ids.len(), positions.len(), "one position per token");
    check_positions(positions, config.max_src_positions)?;
    let x = tape.lookup(bound.word_emb, ids)?;
    let p = tape.lookup(bound.pos_src, positions)?;
    let mut e = tape.add(x, p)?;
    if config.variant.enc_word_topics() {
        assert_eq!(topics.word_topics.len(), ids.len(), "one topic row per token");
        let product = config.variant.enc_doc_topic_product();
        if product {
            check_width(topics.doc_topic, config.f_prime)?;
        }
        let mut block = Vec::with_capacity(ids.len() * config.f_prime);
        for row in topics.word_topics {
            check_width(row, config.f_prime)?;
            if product {
                block.extend(row.iter().zip(topics.doc_topic).map(|(t, d)| t * d));
            } else {
                block.extend_from_slice(row);
            }
        }
        let block = tape.constant(&[ids.len(), config.f_prime], block);
        e = tape.concat(e, block)?;
    }
    Ok(tape.dropout(e, config.dropout, training, rng)?)
}

/// Embeds a decoder prefix: word plus position embedding, with the document
/// topic vector appended to every row for dec-conditioned variants. Applies
/// embedding dropout.
#[allow(clippy::too_many_arguments)]
pub fn embed_target_prefix<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    ids: &[usize],
    positions: &[usize],
    doc_topic: &[f64],
    training: bool,
    rng: &mut R,
) -> Result<NodeId, ModelError> {
    assert_eq!(ids.len(), positions.len(), "one position per token");
    check_positions(positions, config.max_tgt_positions)?;
    let x = tape.lookup(bound.word_emb, ids)?;
    let p = tape.lookup(bound.pos_tgt, positions)?;
    let mut g = tape.add(x, p)?;
    if config.variant.dec_doc_topic() {
        check_width(doc_topic, config.f_prime)?;
        let block: Vec<f64> =
            std::iter::repeat_with(|| doc_topic).take(ids.len()).flatten().copied().collect();
        let block = tape.constant(&[ids.len(), config.f_prime], block);
        g = tape.concat(g, block)?;
    }
    Ok(tape.dropout(g, config.dropout, training, rng)?)
}

/// Runs the encoder stack over embedded source rows `e` and projects the
/// final states back to the embedding width.
pub fn encode<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    e: NodeId,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOut, ModelError> {
    let mut h = tape.linear(e, bound.enc_in.w, bound.enc_in.b)?;
    for conv in &bound.enc_convs {
        let x = tape.dropout(h, config.dropout, training, rng)?;
        let y = tape.conv1d(x, conv.w, conv.b, config.k, PadMode::Symmetric)?;
        let mut out = tape.glu(y)?;
        if config.layer_norm {
            out = tape.layer_norm(out, LAYER_NORM_EPS)?;
        }
        let mut sum = tape.add(out, h)?;
        if config.residual_scale {
            sum = tape.scale(sum, 0.5f64.sqrt())?;
        }
        h = sum;
    }
    let z = tape.linear(h, bound.enc_out.w, bound.enc_out.b)?;
    Ok(EncoderOut { z, e })
}

/// One attention hop: queries are decoder states projected to the embedding
/// width plus the (padded) target embedding; values are encoder states plus
/// source embeddings. Returns the context projected back to the conv width
/// and the attention map; the caller adds the context into its layer state.
pub fn attend(
    tape: &mut Tape,
    h: NodeId,
    g: NodeId,
    enc: &EncoderOut,
    query: &Projection,
    output: &Projection,
) -> Result<(NodeId, NodeId), ModelError> {
    let q = tape.linear(h, query.w, query.b)?;
    let d = tape.add(q, g)?;
    let scores = tape.matmul_nt(d, enc.z)?;
    let a = tape.softmax(scores)?;
    let values = tape.add(enc.z, enc.e)?;
    let context = tape.matmul(a, values)?;
    let c = tape.linear(context, output.w, output.b)?;
    Ok((c, a))
}

/// Runs the decoder stack over an embedded prefix `g`, attending to the
/// encoder at every layer, and projects to vocabulary logits (one row per
/// prefix position, each predicting the next token).
pub fn decoder_forward<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    enc: &EncoderOut,
    g: NodeId,
    training: bool,
    rng: &mut R,
) -> Result<DecoderOut, ModelError> {
    let we = config.enc_embed_width();
    let wg = config.dec_embed_width();
    debug_assert!(wg <= we, "no variant widens the decoder past the encoder");
    let g_att = if wg < we {
        let n = tape.shape(g)[0];
        let pad = tape.zeros(&[n, we - wg]);
        tape.concat(g, pad)?
    } else {
        g
    };
    let mut h = tape.linear(g, bound.dec_in.w, bound.dec_in.b)?;
    let mut attention = Vec::with_capacity(config.dec_layers);
    for i in 0..config.dec_layers {
        let x = tape.dropout(h, config.dropout, training, rng)?;
        let y = tape.conv1d(x, bound.dec_convs[i].w, bound.dec_convs[i].b, config.k, PadMode::Causal)?;
        let mut out = tape.glu(y)?;
        if config.layer_norm {
            out = tape.layer_norm(out, LAYER_NORM_EPS)?;
        }
        let (c, a) = attend(tape, out, g_att, enc, &bound.dec_attn_q[i], &bound.dec_attn_o[i])?;
        attention.push(a);
        out = tape.add(out, c)?;
        let mut sum = tape.add(out, h)?;
        if config.residual_scale {
            sum = tape.scale(sum, 0.5f64.sqrt())?;
        }
        h = sum;
    }
    let h = tape.dropout(h, config.dropout, training, rng)?;
    let logits = tape.linear(h, bound.out.w, bound.out.b)?;
    Ok(DecoderOut { logits, attention })
}

/// Teacher-forced loss for one pair: encodes the source, decodes with the
/// gold prefix, and returns the mean token negative log-likelihood node.
/// Padding in the target is excluded from the mean.
pub fn forward_loss<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    pair: &EncodedPair,
    topics: TopicVectors,
    training: bool,
    rng: &mut R,
) -> Result<NodeId, ModelError> {
    let n = pair.target_ids.len();
    assert!(n >= 1, "target must end with a stop token");
    let e = embed_source(
        tape,
        bound,
        config,
        &pair.source_ids,
        &pair.source_positions,
        topics,
        training,
        rng,
    )?;
    let enc = encode(tape, bound, config, e, training, rng)?;
    let mut prefix = Vec::with_capacity(n);
    prefix.push(BOS);
    prefix.extend_from_slice(&pair.target_ids[..n - 1]);
    let positions: Vec<usize> = (0..n).collect();
    let g = embed_target_prefix(
        tape,
        bound,
        config,
        &prefix,
        &positions,
        topics.doc_topic,
        training,
        rng,
    )?;
    let dec = decoder_forward(tape, bound, config, &enc, g, training, rng)?;
    let mask: Vec<bool> = pair.target_ids.iter().map(|&t| t == PAD).collect();
    let (loss, _) = tape.softmax_xent(dec.logits, &pair.target_ids, &mask)?;
    Ok(loss)
}

/// Scores the next token after `prefix_ids`: runs the decoder in evaluation
/// mode over the full prefix and returns the last row of logits.
pub fn decode_step(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    enc: &EncoderOut,
    prefix_ids: &[usize],
    doc_topic: &[f64],
) -> Result<Vec<f64>, ModelError> {
    assert!(!prefix_ids.is_empty(), "prefix starts at the start token");
    let n = prefix_ids.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = embed_target_prefix(tape, bound, config, prefix_ids, &positions, doc_topic, false, &mut rng)?;
    let dec = decoder_forward(tape, bound, config, enc, g, false, &mut rng)?;
    let t = tape.shape(dec.logits)[1];
    Ok(tape.values(dec.logits)[(n - 1) * t..n * t].to_vec())
}
