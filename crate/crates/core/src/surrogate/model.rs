use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Record, TileGrid, TILE_KINDS};
use crate::error::{Error, Result};
use crate::maze::{SIZE, TILES};
use crate::nn::{
    leaky_relu_backward, leaky_relu_in_place, Adam, BatchNorm2d, BatchNormCache, Conv2d, Linear, Param, Shape, Tensor,
};

/// Predictions are offset so a zeroed output layer yields the middle of
/// every normalized target range.
const OUTPUT_OFFSET: f64 = 0.5;
const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateMode {
    /// Occupancy predictor feeding the objective/measure head.
    TwoStage,
    /// Head only, on the tile encoding.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub mode: SurrogateMode,
    /// Convolution width `h`; the head's second convolution has `2h`.
    pub channels: usize,
    pub head_hidden: usize,
    pub measure_dims: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("head_hidden", "must be at least 1"));
        }
        if self.measure_dims == 0 {
            return Err(Error::config("measure_dims", "must be at least 1"));
        }
        Ok(())
    }
}

/// Target scaling: objective raw, measures to `[0, 1]` over their ranges,
/// occupancy divided by the time limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub time_limit: f64,
}

impl Normalization {
    pub fn measures(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn denormalize_measures(&self, scaled: &[f64]) -> Vec<f64> {
        scaled
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Only the most recent `window` records are used.
    pub window: usize,
    pub learning_rate: f64,
    pub occupancy_weight: f64,
    /// Stops head gradients from reaching the occupancy stage.
    pub detach_occupancy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            window: 20_000,
            learning_rate: 1e-3,
            occupancy_weight: 1.0,
            detach_occupancy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.occupancy_weight >= 0.0) {
            return Err(Error::config("occupancy_weight", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub records: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub objective: f64,
    pub measures: f64,
    pub occupancy: f64,
    pub total: f64,
}

/// De-normalized surrogate output for one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub objective: f64,
    pub measures: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BatchNormScale,
    BatchNormShift,
    LinearWeight,
    LinearBias,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv-weight",
            ParamKind::ConvBias => "conv-bias",
            ParamKind::BatchNormScale => "batch-norm-scale",
            ParamKind::BatchNormShift => "batch-norm-shift",
            ParamKind::LinearWeight => "linear-weight",
            ParamKind::LinearBias => "linear-bias",
        }
    }
}

fn conv_params(conv: &mut Conv2d) -> Vec<(ParamKind, &mut Param)> {
    let mut v = vec![(ParamKind::ConvWeight, &mut conv.weight)];
    if let Some(b) = &mut conv.bias {
        v.push((ParamKind::ConvBias, b));
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Default)]
struct BlockCache {
    cols_first: Vec<f64>,
    pre_first: Vec<f64>,
    cols_second: Vec<f64>,
    pre_sum: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OccupancyNet {
    input: Conv2d,
    blocks: Vec<ResBlock>,
    output: Conv2d,
}

#[derive(Default)]
struct OccupancyCache {
    cols_in: Vec<f64>,
    pre_in: Vec<f64>,
    blocks: Vec<BlockCache>,
    cols_out: Vec<f64>,
}

impl OccupancyNet {
    fn new<R: Rng + ?Sized>(h: usize, rng: &mut R) -> Self {
        let conv3 = |i, o, rng: &mut R| Conv2d::new(i, o, 3, 1, 1, true, rng);
        let input = conv3(TILE_KINDS, h, rng);
        let blocks = (0..2)
            .map(|_| ResBlock {
                first: conv3(h, h, rng),
                second: conv3(h, h, rng),
            })
            .collect();
        let mut output = Conv2d::new(h, 1, 1, 1, 0, true, rng);
        output.zero_init();
        Self { input, blocks, output }
    }

    /// Output is the normalized occupancy, shape `[N, 1, 16, 16]`.
    fn forward(&self, x: &Tensor, mut cache: Option<&mut OccupancyCache>) -> Tensor {
        let mut a = self.input.forward(x, cache.as_deref_mut().map(|c| &mut c.cols_in));
        if let Some(c) = cache.as_deref_mut() {
            c.pre_in = a.data.clone();
            c.blocks.resize_with(self.blocks.len(), BlockCache::default);
        }
        leaky_relu_in_place(&mut a.data);
        for (i, block) in self.blocks.iter().enumerate() {
            let bc = cache.as_deref_mut().map(|c| &mut c.blocks[i]);
            a = block.forward(&a, bc);
        }
        self.output.forward(&a, cache.map(|c| &mut c.cols_out))
    }

    /// Backpropagates the gradient of the normalized occupancy output.
    fn backward(&mut self, input: Shape, cache: &OccupancyCache, d_out: &Tensor) {
        let hidden = Shape::new(input.n, self.input.out_channels, input.h, input.w);
        let mut d = self.output.backward(hidden, &cache.cols_out, d_out, true).expect("requested");
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(hidden, bc, d);
        }
        leaky_relu_backward(&cache.pre_in, &mut d.data);
        self.input.backward(input, &cache.cols_in, &d, false);
    }

    fn params(&mut self) -> Vec<(ParamKind, &mut Param)> {
        let mut v = conv_params(&mut self.input);
        for b in &mut self.blocks {
            v.extend(conv_params(&mut b.first));
            v.extend(conv_params(&mut b.second));
        }
        v.extend(conv_params(&mut self.output));
        v
    }
}

impl ResBlock {
    fn forward(&self, x: &Tensor, mut cache: Option<&mut BlockCache>) -> Tensor {
        let mut t = self.first.forward(x, cache.as_deref_mut().map(|c| &mut c.cols_first));
        if let Some(c) = cache.as_deref_mut() {
            c.pre_first = t.data.clone();
        }
        leaky_relu_in_place(&mut t.data);
        let mut s = self.second.forward(&t, cache.as_deref_mut().map(|c| &mut c.cols_second));
        for (v, skip) in s.data.iter_mut().zip(&x.data) {
            *v += skip;
        }
        if let Some(c) = cache {
            c.pre_sum = s.data.clone();
        }
        leaky_relu_in_place(&mut s.data);
        s
    }

    fn backward(&mut self, shape: Shape, cache: &BlockCache, mut d: Tensor) -> Tensor {
        leaky_relu_backward(&cache.pre_sum, &mut d.data);
        let mut dt = self.second.backward(shape, &cache.cols_second, &d, true).expect("requested");
        leaky_relu_backward(&cache.pre_first, &mut dt.data);
        let mut dx = self.first.backward(shape, &cache.cols_first, &dt, true).expect("requested");
        for (a, b) in dx.data.iter_mut().zip(&d.data) {
            *a += b;
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Head {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Default)]
struct HeadCache {
    cols1: Vec<f64>,
    bn1: BatchNormCache,
    pre1: Vec<f64>,
    cols2: Vec<f64>,
    bn2: BatchNormCache,
    pre2: Vec<f64>,
    flat: Vec<f64>,
    pre_fc1: Vec<f64>,
    hidden: Vec<f64>,
}

impl Head {
    fn new<R: Rng + ?Sized>(inputs: usize, h: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        // Convolutions feeding batch norm carry no bias of their own.
        let conv1 = Conv2d::new(inputs, h, 4, 2, 1, false, rng);
        let conv2 = Conv2d::new(h, 2 * h, 4, 2, 1, false, rng);
        let side = SIZE / 4;
        let fc1 = Linear::new(2 * h * side * side, hidden, rng);
        let mut fc2 = Linear::new(hidden, outputs, rng);
        fc2.zero_init();
        Self {
            conv1,
            bn1: BatchNorm2d::new(h),
            conv2,
            bn2: BatchNorm2d::new(2 * h),
            fc1,
            fc2,
        }
    }

    fn forward(&mut self, x: &Tensor, train: Option<&mut HeadCache>) -> Vec<f64> {
        let n = x.shape.n;
        match train {
            Some(c) => {
                let a = self.conv1.forward(x, Some(&mut c.cols1));
                let mut a = self.bn1.forward_train(&a, &mut c.bn1);
                c.pre1 = a.data.clone();
                leaky_relu_in_place(&mut a.data);
                let b = self.conv2.forward(&a, Some(&mut c.cols2));
                let mut b = self.bn2.forward_train(&b, &mut c.bn2);
                c.pre2 = b.data.clone();
                leaky_relu_in_place(&mut b.data);
                c.flat = b.data;
                let mut f = self.fc1.forward(&c.flat, n);
                c.pre_fc1 = f.clone();
                leaky_relu_in_place(&mut f);
                c.hidden = f;
                let mut out = self.fc2.forward(&c.hidden, n);
                out.iter_mut().for_each(|v| *v += OUTPUT_OFFSET);
                out
            }
            None => self.forward_eval(x),
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Vec<f64> {
        let n = x.shape.n;
        let mut a = self.bn1.forward_eval(&self.conv1.forward(x, None));
        leaky_relu_in_place(&mut a.data);
        let mut b = self.bn2.forward_eval(&self.conv2.forward(&a, None));
        leaky_relu_in_place(&mut b.data);
        let mut f = self.fc1.forward(&b.data, n);
        leaky_relu_in_place(&mut f);
        let mut out = self.fc2.forward(&f, n);
        out.iter_mut().for_each(|v| *v += OUTPUT_OFFSET);
        out
    }

    fn backward(&mut self, input: Shape, c: &HeadCache, d_out: &[f64], need_dx: bool) -> Option<Tensor> {
        let n = input.n;
        let mut d = self.fc2.backward(&c.hidden, d_out, n, true).expect("requested");
        leaky_relu_backward(&c.pre_fc1, &mut d);
        let mut d = self.fc1.backward(&c.flat, &d, n, true).expect("requested");
        leaky_relu_backward(&c.pre2, &mut d);
        let s1 = self.conv1.output_shape(input);
        let s2 = self.conv2.output_shape(s1);
        let d = self.bn2.backward(&c.bn2, &Tensor::from_vec(s2, d));
        let mut d = self.conv2.backward(s1, &c.cols2, &d, true).expect("requested");
        leaky_relu_backward(&c.pre1, &mut d.data);
        let d = self.bn1.backward(&c.bn1, &d);
        self.conv1.backward(input, &c.cols1, &d, need_dx)
    }

    fn params(&mut self) -> Vec<(ParamKind, &mut Param)> {
        let mut v = conv_params(&mut self.conv1);
        v.push((ParamKind::BatchNormScale, &mut self.bn1.gamma));
        v.push((ParamKind::BatchNormShift, &mut self.bn1.beta));
        v.extend(conv_params(&mut self.conv2));
        v.push((ParamKind::BatchNormScale, &mut self.bn2.gamma));
        v.push((ParamKind::BatchNormShift, &mut self.bn2.beta));
        for fc in [&mut self.fc1, &mut self.fc2] {
            let Linear { weight, bias, .. } = fc;
            v.push((ParamKind::LinearWeight, weight));
            v.push((ParamKind::LinearBias, bias));
        }
        v
    }
}

/// Normalized training targets for a set of records.
pub(crate) struct Batch {
    pub(crate) input: Tensor,
    objective: Vec<f64>,
    measures: Vec<f64>,
    occupancy: Vec<f64>,
}

/// Pre-activation values of every leaky ReLU in one training pass.
pub(crate) struct Activations(pub(crate) Vec<f64>);

pub(crate) fn one_hot(tiles: &[&TileGrid]) -> Tensor {
    let shape = Shape::new(tiles.len(), TILE_KINDS, SIZE, SIZE);
    let mut t = Tensor::zeros(shape);
    for (n, grid) in tiles.iter().enumerate() {
        for (i, &code) in grid.iter().enumerate() {
            t.data[(n * TILE_KINDS + code as usize) * TILES + i] = 1.0;
        }
    }
    t
}

fn stack_occupancy(x: &Tensor, occ: &[f64]) -> Tensor {
    let n = x.shape.n;
    let c = x.shape.c;
    let shape = Shape::new(n, c + 1, x.shape.h, x.shape.w);
    let plane = x.shape.h * x.shape.w;
    let mut out = Vec::with_capacity(shape.len());
    for i in 0..n {
        out.extend_from_slice(&x.data[i * c * plane..(i + 1) * c * plane]);
        out.extend_from_slice(&occ[i * plane..(i + 1) * plane]);
    }
    Tensor::from_vec(shape, out)
}

fn collect_params<'a>(occupancy: &'a mut Option<OccupancyNet>, head: &'a mut Head) -> Vec<(ParamKind, &'a mut Param)> {
    let mut v = Vec::new();
    if let Some(net) = occupancy {
        v.extend(net.params());
    }
    v.extend(head.params());
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    arch: Architecture,
    norm: Normalization,
    occupancy: Option<OccupancyNet>,
    head: Head,
    adam: Adam,
}

impl SurrogateModel {
    pub fn new(arch: Architecture, norm: Normalization, seed: u64) -> Result<Self> {
        arch.validate()?;
        if norm.lower.len() != arch.measure_dims || norm.upper.len() != arch.measure_dims {
            return Err(Error::config("normalization", "bounds must match the measure count"));
        }
        if norm.lower.iter().zip(&norm.upper).any(|(l, u)| !(l < u)) || !(norm.time_limit > 0.0) {
            return Err(Error::config("normalization", "ranges must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = arch.channels;
        let (occupancy, inputs) = match arch.mode {
            SurrogateMode::TwoStage => (Some(OccupancyNet::new(h, &mut rng)), TILE_KINDS + 1),
            SurrogateMode::Direct => (None, TILE_KINDS),
        };
        let head = Head::new(inputs, h, arch.head_hidden, 1 + arch.measure_dims, &mut rng);
        let model = Self {
            arch,
            norm,
            occupancy,
            head,
            adam: Adam::new(TrainConfig::default().learning_rate),
        };
        model.dry_run();
        Ok(model)
    }

    /// Checks every stage's output shape on a zero input.
    fn dry_run(&self) {
        let x = Tensor::zeros(Shape::new(2, TILE_KINDS, SIZE, SIZE));
        let head_in = match &self.occupancy {
            Some(net) => {
                let occ = net.forward(&x, None);
                assert_eq!(occ.shape, Shape::new(2, 1, SIZE, SIZE));
                stack_occupancy(&x, &occ.data)
            }
            None => x,
        };
        let s1 = self.head.conv1.output_shape(head_in.shape);
        let s2 = self.head.conv2.output_shape(s1);
        assert_eq!((s1.h, s2.h), (SIZE / 2, SIZE / 4));
        assert_eq!(self.head.forward_eval(&head_in).len(), 2 * (1 + self.arch.measure_dims));
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn mode(&self) -> SurrogateMode {
        self.arch.mode
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.step
    }

    /// Every trainable array in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Param)> {
        collect_params(&mut self.occupancy, &mut self.head)
    }

    /// Replaces the zeroed output layers with fan-in scaled random weights.
    pub fn randomize_output_layers(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(net) = &mut self.occupancy {
            let o = &net.output;
            net.output = Conv2d::new(o.in_channels, o.out_channels, 1, 1, 0, true, &mut rng);
        }
        let f = &self.head.fc2;
        self.head.fc2 = Linear::new(f.inputs, f.outputs, &mut rng);
    }

    pub(crate) fn batch(&self, records: &[&Record]) -> Result<Batch> {
        let m = self.arch.measure_dims;
        let grids: Vec<TileGrid> = records.iter().map(|r| r.tile_grid()).collect();
        let refs: Vec<&TileGrid> = grids.iter().collect();
        let mut objective = Vec::with_capacity(records.len());
        let mut measures = Vec::with_capacity(records.len() * m);
        let mut occupancy = Vec::with_capacity(records.len() * TILES);
        for r in records {
            if r.measures.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: r.measures.len(),
                });
            }
            objective.push(r.objective);
            measures.extend(self.norm.measures(&r.measures));
            occupancy.extend(r.occupancy.iter().map(|v| v / self.norm.time_limit));
        }
        Ok(Batch {
            input: one_hot(&refs),
            objective,
            measures,
            occupancy,
        })
    }

    /// Training-mode forward pass and loss; with `backward`, parameter
    /// gradients are accumulated (callers zero them first).
    pub(crate) fn loss_pass(&mut self, batch: &Batch, cfg: &TrainConfig, backward: bool) -> (LossParts, Activations) {
        let n = batch.input.shape.n;
        let m = self.arch.measure_dims;
        let outputs = 1 + m;
        let mut occ_cache = OccupancyCache::default();
        let mut head_cache = HeadCache::default();
        let occ = self.occupancy.as_ref().map(|net| net.forward(&batch.input, Some(&mut occ_cache)));
        let head_in = match &occ {
            Some(o) => stack_occupancy(&batch.input, &o.data),
            None => batch.input.clone(),
        };
        let pred = self.head.forward(&head_in, Some(&mut head_cache));

        let mut parts = LossParts::default();
        let mut d_pred = vec![0.0; pred.len()];
        for i in 0..n {
            let e = pred[i * outputs] - batch.objective[i];
            parts.objective += e * e / n as f64;
            d_pred[i * outputs] = 2.0 * e / n as f64;
            for j in 0..m {
                let e = pred[i * outputs + 1 + j] - batch.measures[i * m + j];
                parts.measures += e * e / (n * m) as f64;
                d_pred[i * outputs + 1 + j] = 2.0 * e / (n * m) as f64;
            }
        }
        let lambda = cfg.occupancy_weight;
        let mut d_occ = None;
        if let Some(o) = &occ {
            let count = (n * TILES) as f64;
            let mut g = Tensor::zeros(o.shape);
            for (k, (p, t)) in o.data.iter().zip(&batch.occupancy).enumerate() {
                let e = p - t;
                parts.occupancy += e * e / count;
                g.data[k] = lambda * 2.0 * e / count;
            }
            d_occ = Some(g);
        }
        parts.total = parts.objective + parts.measures + lambda * parts.occupancy;

        let mut pre = Vec::new();
        pre.extend_from_slice(&occ_cache.pre_in);
        for b in &occ_cache.blocks {
            pre.extend_from_slice(&b.pre_first);
            pre.extend_from_slice(&b.pre_sum);
        }
        pre.extend_from_slice(&head_cache.pre1);
        pre.extend_from_slice(&head_cache.pre2);
        pre.extend_from_slice(&head_cache.pre_fc1);

        if backward {
            let through = occ.is_some() && !cfg.detach_occupancy;
            let d_in = self.head.backward(head_in.shape, &head_cache, &d_pred, through);
            if let (Some(net), Some(mut g)) = (self.occupancy.as_mut(), d_occ) {
                if let Some(d_in) = d_in {
                    let plane = TILES;
                    let c = TILE_KINDS + 1;
                    for i in 0..n {
                        let src = &d_in.data[(i * c + TILE_KINDS) * plane..(i * c + c) * plane];
                        for (a, b) in g.data[i * plane..(i + 1) * plane].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                net.backward(batch.input.shape, &occ_cache, &g);
            }
        }
        (parts, Activations(pre))
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Mini-batch Adam on the most recent `cfg.window` records.
    pub fn train<R: Rng + ?Sized>(&mut self, records: &[Record], cfg: &TrainConfig, rng: &mut R) -> Result<TrainReport> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        let window = &records[records.len().saturating_sub(cfg.window)..];
        self.adam.lr = cfg.learning_rate;
        let mut order: Vec<usize> = (0..window.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let recs: Vec<&Record> = chunk.iter().map(|&i| &window[i]).collect();
                let batch = self.batch(&recs)?;
                self.zero_grad();
                let (loss, _) = self.loss_pass(&batch, cfg, true);
                total += loss.total * chunk.len() as f64;
                let Self { occupancy, head, adam, .. } = self;
                let mut params: Vec<&mut Param> = collect_params(occupancy, head).into_iter().map(|(_, p)| p).collect();
                adam.update(&mut params);
            }
            let mean = total / window.len() as f64;
            if !mean.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            epoch_losses.push(mean);
        }
        Ok(TrainReport {
            epoch_losses,
            steps: self.adam.step,
            records: window.len(),
        })
    }

    /// Mean training-mode loss over `records` without updating anything
    /// except batch-norm running statistics on a scratch copy.
    pub fn loss(&self, records: &[Record], cfg: &TrainConfig) -> Result<LossParts> {
        let mut scratch = self.clone();
        let refs: Vec<&Record> = records.iter().collect();
        let batch = scratch.batch(&refs)?;
        Ok(scratch.loss_pass(&batch, cfg, false).0)
    }

    fn occupancy_eval(&self, x: &Tensor) -> Result<Tensor> {
        match &self.occupancy {
            Some(net) => Ok(net.forward(x, None)),
            None => Err(Error::Contract("a direct surrogate has no occupancy stage".into())),
        }
    }

    /// Predicted occupancy in visit counts, one 256-vector per environment.
    pub fn predict_ancillary(&self, tiles: &[TileGrid]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&TileGrid> = chunk.iter().collect();
            let occ = self.occupancy_eval(&one_hot(&refs))?;
            out.extend(occ.data.chunks_exact(TILES).map(|c| c.iter().map(|v| v * self.norm.time_limit).collect()));
        }
        Ok(out)
    }

    /// Objective and measures from tiles plus occupancy (in visit counts).
    /// Two-stage models require occupancy; direct models reject it.
    pub fn predict(&self, tiles: &[TileGrid], occupancy: Option<&[Vec<f64>]>) -> Result<Vec<Prediction>> {
        match (self.arch.mode, occupancy) {
            (SurrogateMode::TwoStage, None) => {
                return Err(Error::Contract("two-stage prediction needs an occupancy grid".into()))
            }
            (SurrogateMode::Direct, Some(_)) => {
                return Err(Error::Contract("direct prediction takes no occupancy grid".into()))
            }
            (_, Some(occ)) => {
                if occ.len() != tiles.len() {
                    return Err(Error::DimensionMismatch {
                        expected: tiles.len(),
                        got: occ.len(),
                    });
                }
                for o in occ {
                    if o.len() != TILES {
                        return Err(Error::DimensionMismatch {
                            expected: TILES,
                            got: o.len(),
                        });
                    }
                    if o.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("occupancy"));
                    }
                }
            }
            _ => {}
        }
        let mut out = Vec::with_capacity(tiles.len());
        for (k, chunk) in tiles.chunks(INFERENCE_CHUNK).enumerate() {
            let refs: Vec<&TileGrid> = chunk.iter().collect();
            let x = one_hot(&refs);
            let head_in = match occupancy {
                Some(occ) => {
                    let scaled: Vec<f64> = occ[k * INFERENCE_CHUNK..k * INFERENCE_CHUNK + chunk.len()]
                        .iter()
                        .flat_map(|o| o.iter().map(|v| v / self.norm.time_limit))
                        .collect();
                    stack_occupancy(&x, &scaled)
                }
                None => x,
            };
            out.extend(self.decode_outputs(&self.head.forward_eval(&head_in)));
        }
        Ok(out)
    }

    /// Full pipeline: two-stage models feed their own occupancy prediction
    /// to the head.
    pub fn predict_end_to_end(&self, tiles: &[TileGrid]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&TileGrid> = chunk.iter().collect();
            let x = one_hot(&refs);
            let head_in = match self.arch.mode {
                SurrogateMode::TwoStage => {
                    let occ = self.occupancy_eval(&x)?;
                    stack_occupancy(&x, &occ.data)
                }
                SurrogateMode::Direct => x,
            };
            out.extend(self.decode_outputs(&self.head.forward_eval(&head_in)));
        }
        Ok(out)
    }

    fn decode_outputs(&self, raw: &[f64]) -> Vec<Prediction> {
        raw.chunks_exact(1 + self.arch.measure_dims)
            .map(|row| Prediction {
                objective: row[0],
                measures: self.norm.denormalize_measures(&row[1..]),
            })
            .collect()
    }
}
