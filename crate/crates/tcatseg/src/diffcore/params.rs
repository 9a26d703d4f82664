//! Named trainable arrays, parameter binding onto tapes, and the binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian u32, payload little-endian
//! f64): magic `TCAT`, version, array count, then per array: name length,
//! name bytes, rank, extents, raw values.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::{Tape, TensorId};

const MAGIC: &[u8; 4] = b"TCAT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named parameter arrays. Registration order is the
/// creation order of the model and fixes checkpoint layout and gradient
/// merge order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<ParamArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.arrays.iter().map(|a| a.numel()).sum()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract {
                op: "param_register",
                msg: format!("duplicate parameter name {name:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract {
                op: "param_register",
                msg: format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            });
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.arrays.push(ParamArray {
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    /// Affine weights uniform in +-sqrt(1/fan_in), biases zero.
    pub fn register_affine(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<()> {
        let bound = (2.0 / d_in as f64).sqrt(); // EXPERIMENT f2
        let w: Vec<f64> = (0..d_in * d_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(&format!("{name}.w"), &[d_in, d_out], w)?;
        self.register(&format!("{name}.b"), &[d_out], vec![0.0; d_out])
    }

    pub fn register_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.register(name, &[], vec![value])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.position(name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.position(name).map(move |i| &mut self.arrays[i])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn array(&self, idx: usize) -> &ParamArray {
        &self.arrays[idx]
    }

    pub fn array_mut(&mut self, idx: usize) -> &mut ParamArray {
        &mut self.arrays[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamArray)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }

    /// True when both stores hold the same names with the same shapes, in
    /// the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for (name, arr) in self.iter() {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
            for &e in &arr.shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &arr.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format(format!(
                    "checkpoint truncated at byte {} (wanted {} more)",
                    *pos, n
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".to_string()));
        }
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut pos)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("non-utf8 parameter name".to_string()))?;
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            store.register(&name, &shape, data)?;
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "trailing bytes in checkpoint ({} unread)",
                bytes.len() - pos
            )));
        }
        Ok(store)
    }
}

/// Binds store parameters onto a fresh tape, once per name, and reads
/// gradients back in store order after backward.
pub struct ParamBinding<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<TensorId>>,
}

impl<'a> ParamBinding<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        ParamBinding {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape id of a named parameter, binding it as a trainable leaf on
    /// first use.
    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        let idx = self.store.position(name).ok_or_else(|| Error::Contract {
            op: "param_bind",
            msg: format!("unknown parameter {name:?}"),
        })?;
        if let Some(id) = self.bound[idx] {
            return Ok(id);
        }
        let arr = self.store.array(idx);
        let id = self.tape.leaf(&arr.shape, arr.data.clone())?;
        self.bound[idx] = Some(id);
        Ok(id)
    }

    /// Gradients in store order; zeros for parameters that were never bound
    /// or never reached by backward.
    pub fn collect_grads(&self) -> Vec<Vec<f64>> {
        (0..self.store.len())
            .map(|idx| match self.bound[idx] {
                Some(id) => match self.tape.grad(id) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; self.store.array(idx).numel()],
                },
                None => vec![0.0; self.store.array(idx).numel()],
            })
            .collect()
    }
}

/// A named affine map `x W + b` living in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Affine {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Affine {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.register_affine(rng, &self.name, self.d_in, self.d_out)
    }

    pub fn apply(&self, b: &mut ParamBinding, x: TensorId) -> Result<TensorId> {
        let w = b.param(&format!("{}.w", self.name))?;
        let bias = b.param(&format!("{}.b", self.name))?;
        let y = b.tape.matmul(x, w)?;
        b.tape.add_row_vec(y, bias)
    }
}

/// Affine layers with ReLU between them and a plain affine at the end.
/// `dims = [in, hidden.., out]`; a two-entry dims list is a single affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least [in, out] dims");
        Mlp {
            name: name.into(),
            dims,
        }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in 0..self.layers() {
            store.register_affine(
                rng,
                &format!("{}.l{l}", self.name),
                self.dims[l],
                self.dims[l + 1],
            )?;
        }
        Ok(())
    }

    pub fn apply(&self, b: &mut ParamBinding, x: TensorId) -> Result<TensorId> {
        if b.tape.shape(x).last().copied() != Some(self.dims[0]) {
            return Err(Error::Dimension {
                op: "mlp_apply",
                lhs: b.tape.shape(x).to_vec(),
                rhs: vec![self.dims[0]],
            });
        }
        let mut h = x;
        for l in 0..self.layers() {
            let w = b.param(&format!("{}.l{l}.w", self.name))?;
            let bias = b.param(&format!("{}.l{l}.b", self.name))?;
            h = b.tape.matmul(h, w)?;
            h = b.tape.add_row_vec(h, bias)?;
            if l + 1 < self.layers() {
                h = b.tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
        store.get_mut(name).unwrap().data = data;
    }

    #[test]
    fn mlp_identity_affine_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", vec![2, 2]);
        mlp.register(&mut store, &mut rng).unwrap();
        set(&mut store, "m.l0.w", vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "m.l0.b", vec![0.0, 0.0]);
        let mut b = ParamBinding::new(&store);
        let x = b.tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let y = mlp.apply(&mut b, x).unwrap();
        assert_eq!(b.tape.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn mlp_zero_weights_returns_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", vec![3, 2]);
        mlp.register(&mut store, &mut rng).unwrap();
        set(&mut store, "m.l0.w", vec![0.0; 6]);
        set(&mut store, "m.l0.b", vec![0.7, -0.3]);
        for xdata in [vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 9.0]] {
            let mut b = ParamBinding::new(&store);
            let x = b.tape.constant(&[1, 3], xdata).unwrap();
            let y = mlp.apply(&mut b, x).unwrap();
            assert_eq!(b.tape.value(y), &[0.7, -0.3]);
        }
    }

    #[test]
    fn mlp_two_layer_matches_hand_forward() {
        // Layer 1: W = [[1,2],[0,1]], b = [0.5,-1], ReLU.
        // Layer 2: W = [[1],[1]], b = [0.25].
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", vec![2, 2, 1]);
        mlp.register(&mut store, &mut rng).unwrap();
        set(&mut store, "m.l0.w", vec![1.0, 2.0, 0.0, 1.0]);
        set(&mut store, "m.l0.b", vec![0.5, -1.0]);
        set(&mut store, "m.l1.w", vec![1.0, 1.0]);
        set(&mut store, "m.l1.b", vec![0.25]);

        // x = [1,1]: pre-act [1.5, 2.0], out 3.75.
        let mut b = ParamBinding::new(&store);
        let x = b.tape.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let y = mlp.apply(&mut b, x).unwrap();
        assert!((b.tape.value(y)[0] - 3.75).abs() < 1e-15);

        // x = [-1,0]: pre-act [-0.5,-3] clamps to zero, out = 0.25.
        let mut b = ParamBinding::new(&store);
        let x = b.tape.constant(&[1, 2], vec![-1.0, 0.0]).unwrap();
        let y = mlp.apply(&mut b, x).unwrap();
        assert!((b.tape.value(y)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mlp_rejects_trailing_extent_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", vec![3, 2]);
        mlp.register(&mut store, &mut rng).unwrap();
        let mut b = ParamBinding::new(&store);
        let x = b.tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(mlp.apply(&mut b, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn binding_is_cached_and_grads_follow_store_order() {
        let mut store = ParamStore::new();
        store.register("a", &[2], vec![1.0, 2.0]).unwrap();
        store.register("b", &[1], vec![3.0]).unwrap();
        let mut b = ParamBinding::new(&store);
        let a1 = b.param("a").unwrap();
        let a2 = b.param("a").unwrap();
        assert_eq!(a1, a2);
        let s = b.tape.sum_all(a1);
        b.tape.backward(s).unwrap();
        let grads = b.collect_grads();
        assert_eq!(grads[0], vec![1.0, 1.0]);
        assert_eq!(grads[1], vec![0.0]); // never bound
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        store.register_affine(&mut rng, "layer", 7, 3).unwrap();
        store.register_scalar("beta", -0.125).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tcat");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert!(store.same_layout(&loaded));
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.data.len(), b.data.len());
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.tcat");
        std::fs::write(&bad, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(ParamStore::load(&bad), Err(Error::Format(_))));

        let mut store = ParamStore::new();
        store.register("a", &[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = dir.path().join("good.tcat");
        store.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let trunc = dir.path().join("trunc.tcat");
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ParamStore::load(&trunc), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut store = ParamStore::new();
        store.register("a", &[1], vec![0.0]).unwrap();
        assert!(store.register("a", &[1], vec![0.0]).is_err());
    }
}
