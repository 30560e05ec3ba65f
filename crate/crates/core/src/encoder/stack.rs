//! Full model: per-element features, a consistent pooling layer, optional
//! self-attention blocks on the pooled rows, an optional row-wise ReLU
//! network, and a linear head.
//!
//! Parameters of the feature extractor and the pooling layer are in
//! [`ParamGroup::Encoder`]; everything after pooling is in
//! [`ParamGroup::Decoder`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::accumulator::AccumulatorState;
use crate::encoder::config::UmbcConfig;
use crate::encoder::deepsets::{self, SetPooling, SumAccumulator};
use crate::encoder::mlp::{FeatureExtractor, Linear, MlpConfig};
use crate::encoder::sab::SetAttentionBlock;
use crate::encoder::sse::{self, RowPooling};
use crate::encoder::umbc::{SlotSample, UmbcLayer};
use crate::encoder::SetEncoder;
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoolingSpec {
    Umbc(UmbcConfig),
    Deepsets { pooling: SetPooling },
    Sse { slots: UmbcConfig, row_pooling: RowPooling },
}

fn default_outputs() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub phi: MlpConfig,
    pub pooling: PoolingSpec,
    #[serde(default)]
    pub attention_blocks: usize,
    /// Hidden widths of a row-wise ReLU network between the attention
    /// blocks and the head.
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
    /// Rows of the head output (mixture components for the clustering task).
    pub components: usize,
    #[serde(default = "default_outputs")]
    pub outputs_per_component: usize,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))
    }
}

#[derive(Clone, Debug)]
enum Pool {
    Slots(UmbcLayer),
    Sum(SetPooling),
    SlotRows(UmbcLayer, RowPooling),
}

/// Off-tape sums of the elements whose gradient is stopped.
#[derive(Clone, Debug)]
pub enum Frozen {
    Slots(AccumulatorState),
    Sum(SumAccumulator),
}

impl Frozen {
    pub fn count(&self) -> usize {
        match self {
            Frozen::Slots(s) => s.count(),
            Frozen::Sum(s) => s.count(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    spec: ModelSpec,
    phi: FeatureExtractor,
    pool: Pool,
    blocks: Vec<SetAttentionBlock>,
    decoder: FeatureExtractor,
    head: Linear,
    pooled_shape: (usize, usize),
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let config_err = |m: String| Error::Config(m);
        if spec.components == 0 || spec.outputs_per_component == 0 {
            return Err(config_err("head dimensions must be positive".into()));
        }
        let phi = FeatureExtractor::new(store, "phi", &spec.phi, ParamGroup::Encoder, rng)
            .map_err(|e| config_err(e.to_string()))?;
        let dh = phi.output_dim();
        let with_features = |c: &UmbcConfig| -> Result<UmbcConfig> {
            let mut c = c.clone();
            if c.feature_dim == 0 {
                c.feature_dim = dh;
            } else if c.feature_dim != dh {
                return Err(config_err(format!(
                    "slot layer feature_dim {} does not match the feature extractor output {dh}",
                    c.feature_dim
                )));
            }
            Ok(c)
        };
        let (pool, pooled_shape) = match &spec.pooling {
            PoolingSpec::Umbc(c) => {
                let c = with_features(c)?;
                let layer = UmbcLayer::new(store, "umbc", &c, rng)?;
                (Pool::Slots(layer), (c.slots, c.attn_dim))
            }
            PoolingSpec::Deepsets { pooling } => (Pool::Sum(*pooling), (1, dh)),
            PoolingSpec::Sse { slots, row_pooling } => {
                let c = with_features(slots)?;
                let layer = UmbcLayer::new(store, "sse", &c, rng)?;
                sse::check_sse_layer(&layer).map_err(|e| config_err(e.to_string()))?;
                (Pool::SlotRows(layer, *row_pooling), (1, c.attn_dim))
            }
        };
        let (rows, width) = pooled_shape;
        let mut blocks = Vec::with_capacity(spec.attention_blocks);
        for i in 0..spec.attention_blocks {
            blocks.push(SetAttentionBlock::new(store, &format!("sab.{i}"), width, ParamGroup::Decoder, rng)?);
        }
        let decoder = FeatureExtractor::new(
            store,
            "decoder",
            &MlpConfig {
                input_dim: width,
                hidden: spec.decoder_hidden.clone(),
            },
            ParamGroup::Decoder,
            rng,
        )
        .map_err(|e| config_err(e.to_string()))?;
        let head_out = if rows == spec.components {
            spec.outputs_per_component
        } else if rows == 1 {
            spec.components * spec.outputs_per_component
        } else {
            return Err(config_err(format!(
                "pooled output has {rows} rows; the head needs 1 or {} (one per component)",
                spec.components
            )));
        };
        let head = Linear::new(store, "head", decoder.output_dim(), head_out, true, ParamGroup::Decoder, rng)?;
        Ok(Self {
            spec: spec.clone(),
            phi,
            pool,
            blocks,
            decoder,
            head,
            pooled_shape,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn phi(&self) -> &FeatureExtractor {
        &self.phi
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    /// Shape of the pooling layer's output.
    pub fn pooled_shape(&self) -> (usize, usize) {
        self.pooled_shape
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.spec.components, self.spec.outputs_per_component)
    }

    /// The slot pooling layer, if the stack has one.
    pub fn slot_layer(&self) -> Option<&UmbcLayer> {
        match &self.pool {
            Pool::Slots(l) | Pool::SlotRows(l, _) => Some(l),
            Pool::Sum(_) => None,
        }
    }

    pub fn sample_slots<R: Rng + ?Sized>(&self, rng: &mut R) -> SlotSample {
        match self.slot_layer() {
            Some(l) => l.sample_slots(rng),
            None => SlotSample::Deterministic,
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        ensure!(x.rows() > 0, "empty set");
        ensure!(
            x.cols() == self.input_dim(),
            "set elements have {} features, model expects {}",
            x.cols(),
            self.input_dim()
        );
        Ok(())
    }

    fn empty_frozen(&self) -> Frozen {
        match &self.pool {
            Pool::Slots(l) | Pool::SlotRows(l, _) => Frozen::Slots(l.empty_state()),
            Pool::Sum(_) => Frozen::Sum(SumAccumulator::empty(self.phi.output_dim())),
        }
    }

    /// Streams `cells` of `x` into off-tape sums, one cell at a time.
    pub fn accumulate_cells<'a, I>(&self, store: &ParamStore, x: &Matrix, cells: I, sample: &SlotSample) -> Result<Frozen>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let mut stream = self.stream(store, sample)?;
        for cell in cells {
            ensure!(!cell.is_empty(), "empty partition cell");
            stream.push(&x.select_rows(cell)?)?;
        }
        Ok(stream.acc)
    }

    /// An empty incremental encoding; feed it chunks with [`SetStream::push`].
    pub fn stream<'a>(&'a self, store: &'a ParamStore, sample: &SlotSample) -> Result<SetStream<'a>> {
        let queries = match self.slot_layer() {
            Some(l) => Some(l.queries(store, sample)?),
            None => None,
        };
        Ok(SetStream {
            stack: self,
            store,
            queries,
            acc: self.empty_frozen(),
        })
    }

    fn finalize_pool(&self, acc: &Frozen) -> Result<Matrix> {
        match (&self.pool, acc) {
            (Pool::Slots(l), Frozen::Slots(s)) => l.finalize(s),
            (Pool::SlotRows(l, p), Frozen::Slots(s)) => Ok(sse::pool_rows(&l.finalize(s)?, *p)),
            (Pool::Sum(p), Frozen::Sum(s)) => s.finalize(*p),
            _ => unreachable!("accumulator kind follows the pooling layer"),
        }
    }

    /// Pooling-layer output of the whole set, streamed over `chunks`.
    pub fn pool(&self, store: &ParamStore, x: &Matrix, chunks: &[Vec<usize>], sample: &SlotSample) -> Result<Matrix> {
        self.check_input(x)?;
        ensure!(!chunks.is_empty(), "empty partition");
        let acc = self.accumulate_cells(store, x, chunks.iter().map(Vec::as_slice), sample)?;
        self.finalize_pool(&acc)
    }

    /// Pooling-layer output on the tape. Rows `live` of `x` are recorded;
    /// everything in `frozen` enters as a constant.
    pub fn pool_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Matrix,
        live: &[usize],
        frozen: &Frozen,
        sample: &SlotSample,
    ) -> Result<Var> {
        self.check_input(x)?;
        let live_features = if live.is_empty() {
            None
        } else {
            let xl = tape.constant(x.select_rows(live)?);
            Some(self.phi.forward_tape(tape, store, xl)?)
        };
        match (&self.pool, frozen) {
            (Pool::Slots(l), Frozen::Slots(state)) => {
                let q = l.queries_tape(tape, store, sample)?;
                l.pool_tape(tape, store, q, live_features, state)
            }
            (Pool::SlotRows(l, p), Frozen::Slots(state)) => {
                let q = l.queries_tape(tape, store, sample)?;
                let z = l.pool_tape(tape, store, q, live_features, state)?;
                Ok(sse::pool_rows_tape(tape, z, *p))
            }
            (Pool::Sum(p), Frozen::Sum(sum)) => deepsets::pool_tape(tape, live_features, sum, *p),
            _ => Err(Error::Contract("frozen sums do not match the pooling layer".into())),
        }
    }

    /// Attention blocks applied to a pooled output.
    pub fn blocks_tape(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let mut z = pooled;
        for b in &self.blocks {
            z = b.forward_tape(tape, store, z)?;
        }
        Ok(z)
    }

    /// Attention blocks, the decoder network and the head, reshaped to
    /// `components x outputs`.
    pub fn decode_tape(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let z = self.blocks_tape(tape, store, pooled)?;
        let z = self.decoder.forward_tape(tape, store, z)?;
        let out = self.head.forward_tape(tape, store, z)?;
        let (r, c) = self.output_shape();
        if tape.shape(out) == (r, c) {
            Ok(out)
        } else {
            tape.reshape(out, r, c)
        }
    }

    fn blocks_value(&self, store: &ParamStore, pooled: Matrix) -> Result<Matrix> {
        if self.blocks.is_empty() {
            return Ok(pooled);
        }
        let mut tape = Tape::new();
        let p = tape.constant(pooled);
        let z = self.blocks_tape(&mut tape, store, p)?;
        Ok(tape.value(z).clone())
    }

    fn decode_value(&self, store: &ParamStore, pooled: Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = tape.constant(pooled);
        let out = self.decode_tape(&mut tape, store, p)?;
        Ok(tape.value(out).clone())
    }

    /// Set representation after the attention blocks, streamed over `chunks`.
    pub fn encode(&self, store: &ParamStore, x: &Matrix, chunks: &[Vec<usize>], sample: &SlotSample) -> Result<Matrix> {
        let pooled = self.pool(store, x, chunks, sample)?;
        self.blocks_value(store, pooled)
    }

    /// Head output of the whole set, streamed over `chunks`.
    pub fn forward(&self, store: &ParamStore, x: &Matrix, chunks: &[Vec<usize>], sample: &SlotSample) -> Result<Matrix> {
        let pooled = self.pool(store, x, chunks, sample)?;
        self.decode_value(store, pooled)
    }
}

/// A set encoding built one chunk at a time. Only the running sums are
/// kept, so memory does not grow with the number of elements seen.
pub struct SetStream<'a> {
    stack: &'a EncoderStack,
    store: &'a ParamStore,
    queries: Option<Matrix>,
    acc: Frozen,
}

impl SetStream<'_> {
    /// Adds the rows of `chunk` to the set.
    pub fn push(&mut self, chunk: &Matrix) -> Result<()> {
        self.stack.check_input(chunk)?;
        let h = self.stack.phi.forward(self.store, chunk)?;
        match (&mut self.acc, self.stack.slot_layer(), &self.queries) {
            (Frozen::Slots(state), Some(layer), Some(q)) => layer.accumulate(self.store, q, &h, state),
            (Frozen::Sum(sum), None, None) => sum.add_chunk(&h),
            _ => unreachable!("accumulator kind follows the pooling layer"),
        }
    }

    /// Elements consumed so far.
    pub fn count(&self) -> usize {
        self.acc.count()
    }

    pub fn pooled(&self) -> Result<Matrix> {
        ensure!(self.count() > 0, "no elements streamed");
        self.stack.finalize_pool(&self.acc)
    }

    /// Representation after the attention blocks.
    pub fn encoding(&self) -> Result<Matrix> {
        self.stack.blocks_value(self.store, self.pooled()?)
    }

    /// Head output.
    pub fn output(&self) -> Result<Matrix> {
        self.stack.decode_value(self.store, self.pooled()?)
    }
}

/// Stack together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub stack: EncoderStack,
    pub store: ParamStore,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = EncoderStack::new(&mut store, spec, &mut rng)?;
        Ok(Self { stack, store })
    }

    /// Slot draw used by [`SetEncoder::encode_chunks`]: fixed per model so
    /// repeated calls see the same slots.
    pub fn fixed_sample(&self) -> SlotSample {
        self.stack.sample_slots(&mut ChaCha8Rng::seed_from_u64(0))
    }
}

impl SetEncoder for Model {
    fn is_mbc(&self) -> bool {
        true
    }

    fn encode_chunks(&self, x: &Matrix, chunks: &[Vec<usize>]) -> Result<Matrix> {
        self.stack.encode(&self.store, x, chunks, &self.fixed_sample())
    }
}

/// Checks that permuting the slots permutes the rows of the pooled output
/// the same way: with new slot `i` = old slot `perm[i]`, new row `i` must
/// equal old row `perm[i]` within `1e-10`.
pub fn slot_permute_check(stack: &EncoderStack, store: &ParamStore, x: &Matrix, perm: &[usize], sample: &SlotSample) -> Result<bool> {
    let layer = match &stack.pool {
        Pool::Slots(l) => l,
        _ => return Err(Error::Contract("slot permutation needs a slot pooling layer".into())),
    };
    let chunks = [(0..x.rows()).collect::<Vec<_>>()];
    let original = stack.pool(store, x, &chunks, sample)?;
    let mut permuted_store = store.clone();
    layer.permute_slots(&mut permuted_store, perm)?;
    let permuted = stack.pool(&permuted_store, x, &chunks, &sample.permuted(perm)?)?;
    Ok(permuted.max_abs_diff(&original.select_rows(perm)?)? <= 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::config::{Activation, SlotMode};

    fn spec(pooling: PoolingSpec, blocks: usize) -> ModelSpec {
        ModelSpec {
            phi: MlpConfig {
                input_dim: 2,
                hidden: vec![8, 8],
            },
            pooling,
            attention_blocks: blocks,
            decoder_hidden: vec![],
            components: 3,
            outputs_per_component: 5,
        }
    }

    fn umbc(act: Activation) -> PoolingSpec {
        PoolingSpec::Umbc(UmbcConfig::new(3, 4, 6, 0, act))
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(umbc(Activation::SlotExp), 1);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(ModelSpec::from_json(&text).unwrap(), s);
        let ds: ModelSpec = ModelSpec::from_json(
            r#"{"phi":{"input_dim":2,"hidden":[4]},"pooling":{"deepsets":{"pooling":"mean"}},"components":4}"#,
        )
        .unwrap();
        assert_eq!(ds.outputs_per_component, 5);
        assert!(ModelSpec::from_json(r#"{"phi":{"input_dim":2,"hidden":[]},"pooling":{"max":{}},"components":1}"#).is_err());
    }

    #[test]
    fn output_shapes() {
        for pooling in [
            umbc(Activation::Softmax),
            PoolingSpec::Deepsets { pooling: SetPooling::Mean },
            PoolingSpec::Sse {
                slots: UmbcConfig::new(5, 4, 6, 0, Activation::SlotSigmoid).with_slot_mode(SlotMode::StochasticIid),
                row_pooling: RowPooling::Max,
            },
        ] {
            let m = Model::new(&spec(pooling, 1), 1).unwrap();
            let x = Matrix::random_normal(7, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
            let out = m.stack.forward(&m.store, &x, &[(0..7).collect()], &m.fixed_sample()).unwrap();
            assert_eq!(out.shape(), (3, 5));
        }
    }

    #[test]
    fn decoder_network_sits_before_the_head() {
        let mut s = spec(PoolingSpec::Deepsets { pooling: SetPooling::Mean }, 0);
        s.decoder_hidden = vec![7, 9];
        let m = Model::new(&s, 2).unwrap();
        for name in ["decoder.0.weight", "decoder.1.bias"] {
            assert_eq!(m.store.group(m.store.id(name).unwrap()), ParamGroup::Decoder);
        }
        assert_eq!(m.store.value(m.store.id("head.weight").unwrap()).shape(), (9, 15));
        let x = Matrix::random_normal(5, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = m.stack.forward(&m.store, &x, &[(0..5).collect()], &m.fixed_sample()).unwrap();
        assert_eq!(out.shape(), (3, 5));
    }

    #[test]
    fn chunk_stream_matches_forward() {
        for pooling in [
            PoolingSpec::Umbc(UmbcConfig::new(3, 4, 4, 0, Activation::SlotExp)),
            PoolingSpec::Deepsets { pooling: SetPooling::Sum },
        ] {
            let m = Model::new(&spec(pooling, 1), 4).unwrap();
            let x = Matrix::random_normal(11, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            let sample = m.fixed_sample();
            let mut stream = m.stack.stream(&m.store, &sample).unwrap();
            assert!(stream.output().is_err());
            for rows in [0..4, 4..5, 5..11] {
                stream.push(&x.select_rows(&rows.collect::<Vec<_>>()).unwrap()).unwrap();
            }
            assert_eq!(stream.count(), 11);
            let whole = [(0..11).collect()];
            let out = m.stack.forward(&m.store, &x, &whole, &sample).unwrap();
            assert!(stream.output().unwrap().max_abs_diff(&out).unwrap() <= 1e-12);
            let enc = m.stack.encode(&m.store, &x, &whole, &sample).unwrap();
            assert!(stream.encoding().unwrap().max_abs_diff(&enc).unwrap() <= 1e-12);
            assert!(stream.push(&Matrix::zeros(2, 3)).is_err());
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(PoolingSpec::Umbc(UmbcConfig::new(2, 4, 6, 0, Activation::Softmax)), 0);
        assert!(matches!(Model::new(&s, 0), Err(Error::Config(_))));
        s.pooling = PoolingSpec::Umbc(UmbcConfig::new(3, 4, 6, 7, Activation::Softmax));
        assert!(Model::new(&s, 0).is_err());
        s.pooling = PoolingSpec::Sse {
            slots: UmbcConfig::new(3, 4, 6, 0, Activation::Softmax),
            row_pooling: RowPooling::Mean,
        };
        assert!(Model::new(&s, 0).is_err());
    }

    #[test]
    fn masked_pooling_value_equals_streaming() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pooling in [umbc(Activation::SlotSoftmax), PoolingSpec::Deepsets { pooling: SetPooling::Sum }] {
            let m = Model::new(&spec(pooling, 0), 2).unwrap();
            let x = Matrix::random_normal(9, 2, 1.0, &mut rng);
            let sample = m.fixed_sample();
            let chunks = vec![vec![0, 4, 8], vec![1, 2], vec![3, 5, 6, 7]];
            let expected = m.stack.pool(&m.store, &x, &chunks, &sample).unwrap();
            let frozen = m
                .stack
                .accumulate_cells(&m.store, &x, [chunks[0].as_slice(), chunks[2].as_slice()], &sample)
                .unwrap();
            let mut tape = Tape::new();
            let out = m.stack.pool_tape(&mut tape, &m.store, &x, &chunks[1], &frozen, &sample).unwrap();
            assert!(tape.value(out).max_abs_diff(&expected).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn slot_swap_swaps_rows() {
        let m = Model::new(&spec(umbc(Activation::Softmax), 0), 4).unwrap();
        let x = Matrix::random_normal(6, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let s = m.fixed_sample();
        assert!(slot_permute_check(&m.stack, &m.store, &x, &[0, 1, 2], &s).unwrap());
        assert!(slot_permute_check(&m.stack, &m.store, &x, &[1, 0, 2], &s).unwrap());
        assert!(slot_permute_check(&m.stack, &m.store, &x, &[1, 1, 2], &s).is_err());
    }
}
