//! Windowed token encoder: `h_i = W2 tanh(W1 [e_{i-1}; e_i; e_{i+1}] + b1) + b2`.
//!
//! Boundary positions and [`PAD_ID`] tokens use a constant zero vector. Row
//! [`PAD_ID`] of the table is zeroed at init and never read, so it stays zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::PAD_ID;
use crate::diffmath::{Graph, NodeId, ParamStore, SlotId};
use crate::error::{Error, Result};

pub const EMBEDDING: &str = "encoder.embedding";
pub const W1: &str = "encoder.w1";
pub const B1: &str = "encoder.b1";
pub const W2: &str = "encoder.w2";
pub const B2: &str = "encoder.b2";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_h: usize,
}

/// Slot handles of the encoder parameters inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub embedding: SlotId,
    pub w1: SlotId,
    pub b1: SlotId,
    pub w2: SlotId,
    pub b2: SlotId,
}

pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Adds freshly initialized encoder slots to `store`.
pub fn init_encoder(store: &mut ParamStore, vocab_size: usize, d_e: usize, d_h: usize, seed: u64) -> Result<EncoderParams> {
    if vocab_size <= PAD_ID || d_e == 0 || d_h == 0 {
        return Err(Error::Invalid(format!(
            "encoder needs vocab_size > {PAD_ID} and positive dims (got {vocab_size}, {d_e}, {d_h})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = uniform_fan_in(&mut rng, vocab_size * d_e, d_e);
    table[PAD_ID * d_e..(PAD_ID + 1) * d_e].fill(0.0);
    let w1 = uniform_fan_in(&mut rng, d_h * 3 * d_e, 3 * d_e);
    let w2 = uniform_fan_in(&mut rng, d_h * d_h, d_h);
    Ok(EncoderParams {
        dims: EncoderDims { vocab_size, d_e, d_h },
        embedding: store.add_matrix(EMBEDDING, vocab_size, d_e, table, true)?,
        w1: store.add_matrix(W1, d_h, 3 * d_e, w1, true)?,
        b1: store.add_vector(B1, vec![0.0; d_h], true)?,
        w2: store.add_matrix(W2, d_h, d_h, w2, true)?,
        b2: store.add_vector(B2, vec![0.0; d_h], true)?,
    })
}

impl EncoderParams {
    /// Locates the encoder slots in a store (e.g. one read from a checkpoint).
    pub fn locate(store: &ParamStore) -> Result<Self> {
        let embedding = store.id(EMBEDDING)?;
        let e = store.slot(embedding);
        let w1 = store.id(W1)?;
        let w2 = store.id(W2)?;
        let (vocab_size, d_e, d_h) = (e.rows, e.cols, store.slot(w2).rows);
        let p = EncoderParams {
            dims: EncoderDims { vocab_size, d_e, d_h },
            embedding,
            w1,
            b1: store.id(B1)?,
            w2,
            b2: store.id(B2)?,
        };
        let w1s = store.slot(w1);
        if w1s.rows != d_h || w1s.cols != 3 * d_e || store.slot(p.b1).rows != d_h || store.slot(p.b2).rows != d_h {
            return Err(Error::shape("encoder", w1s.shape_string(), format!("d_e={d_e} d_h={d_h}")));
        }
        Ok(p)
    }

    /// One contextual vector per token.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Vec<NodeId>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.dims.vocab_size) {
            return Err(Error::Lookup {
                kind: "token id",
                name: format!("{bad} (vocabulary size {})", self.dims.vocab_size),
            });
        }
        let pad = g.input(vec![0.0; self.dims.d_e])?;
        let mut embedded = Vec::with_capacity(ids.len());
        for &id in ids {
            embedded.push(if id == PAD_ID { pad } else { g.row(self.embedding, id)? });
        }
        let mut out = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let left = if i == 0 { pad } else { embedded[i - 1] };
            let right = if i + 1 == ids.len() { pad } else { embedded[i + 1] };
            let window = g.concat(&[left, embedded[i], right])?;
            let pre = g.matvec(self.w1, window)?;
            let b1 = g.param(self.b1)?;
            let pre = g.add(pre, b1)?;
            let hidden = g.tanh(pre);
            let post = g.matvec(self.w2, hidden)?;
            let b2 = g.param(self.b2)?;
            out.push(g.add(post, b2)?);
        }
        Ok(out)
    }
}

/// Value-only encoding.
pub fn encode_values(store: &ParamStore, enc: &EncoderParams, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(store);
    let nodes = enc.encode(&mut g, ids)?;
    Ok(nodes.iter().map(|&n| g.value(n).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;

    fn small(seed: u64) -> (ParamStore, EncoderParams) {
        let mut p = ParamStore::new();
        let e = init_encoder(&mut p, 7, 3, 4, seed).unwrap();
        (p, e)
    }

    #[test]
    fn init_contract() {
        let (p, e) = small(3);
        assert!(p.slot(e.b1).data.iter().all(|&v| v == 0.0));
        assert!(p.slot(e.b2).data.iter().all(|&v| v == 0.0));
        assert!(p.slot(e.embedding).row(PAD_ID).iter().all(|&v| v == 0.0));
        let bound = 1.0 / (9f64).sqrt();
        assert!(p.slot(e.w1).data.iter().all(|v| v.abs() <= bound));
        assert_eq!(small(3).0, p);
        assert_ne!(small(4).0, p);
    }

    #[test]
    fn output_length_matches_sentence() {
        let (p, e) = small(1);
        for n in 1..6 {
            let ids: Vec<usize> = (0..n).map(|i| (i % 5) + 2).collect();
            let h = encode_values(&p, &e, &ids).unwrap();
            assert_eq!(h.len(), n);
            assert!(h.iter().all(|v| v.len() == 4));
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let (mut p, e) = small(1);
        for id in [e.embedding, e.w1, e.w2] {
            p.slot_mut(id).data.fill(0.0);
        }
        let h = encode_values(&p, &e, &[2, 3, 4]).unwrap();
        assert!(h.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head_with_constant_bias() {
        let mut p = ParamStore::new();
        let e = init_encoder(&mut p, 5, 2, 2, 9).unwrap();
        p.slot_mut(e.w1).data.fill(0.0);
        p.slot_mut(e.w2).data.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.slot_mut(e.b2).data.copy_from_slice(&[0.5, -2.0]);
        let h = encode_values(&p, &e, &[2, 3, 4, 0]).unwrap();
        assert!(h.iter().all(|v| v == &vec![0.5, -2.0]));
    }

    #[test]
    fn single_token_window_by_hand() {
        // d_e = d_h = 2; window [pad; e; pad] = [0, 0, 1, 2, 0, 0]
        let mut p = ParamStore::new();
        let e = init_encoder(&mut p, 3, 2, 2, 0).unwrap();
        p.slot_mut(e.embedding).data[4..6].copy_from_slice(&[1.0, 2.0]);
        p.slot_mut(e.w1)
            .data
            .copy_from_slice(&[9.0, 9.0, 0.5, -0.25, 9.0, 9.0, 9.0, 9.0, 0.1, 0.2, 9.0, 9.0]);
        p.slot_mut(e.b1).data.copy_from_slice(&[0.0, 0.5]);
        p.slot_mut(e.w2).data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        p.slot_mut(e.b2).data.copy_from_slice(&[0.25, 0.0]);
        // pre = [0.5 - 0.5, 0.1 + 0.4 + 0.5] = [0, 1]
        let t = 1f64.tanh();
        let want = [2.0 * t + 0.25, 4.0 * t];
        let h = encode_values(&p, &e, &[2]).unwrap();
        assert!((h[0][0] - want[0]).abs() < 1e-15 && (h[0][1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let (p, e) = small(1);
        assert!(matches!(encode_values(&p, &e, &[2, 7]), Err(Error::Lookup { .. })));
    }

    #[test]
    fn permuting_ids_with_rows_preserves_output() {
        let (p, e) = small(5);
        // swap ids 2 and 5 together with their embedding rows
        let mut q = p.clone();
        let d = 3;
        let table = &mut q.slot_mut(e.embedding).data;
        for k in 0..d {
            table.swap(2 * d + k, 5 * d + k);
        }
        let perm = |i: usize| match i {
            2 => 5,
            5 => 2,
            x => x,
        };
        let ids = [2, 3, 5, 6, 2];
        let mapped: Vec<usize> = ids.iter().map(|&i| perm(i)).collect();
        assert_eq!(encode_values(&p, &e, &ids).unwrap(), encode_values(&q, &e, &mapped).unwrap());
    }

    #[test]
    fn gradients_pass_check() {
        let (p, e) = small(11);
        let report = grad_check(
            &p,
            |g| {
                let h = e.encode(g, &[2, 3, 4, 3])?;
                let all = g.concat(&h)?;
                let t = g.tanh(all);
                Ok(g.sum(t))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
