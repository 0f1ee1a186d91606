//! The full multimodal classifier.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, NUM_CLASSES};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::fusion::{EegTo3d, FusionDims, FusionHead};
use crate::imaging::{self, DenseBlockParams, ImagingEncoder};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tabular::{TabularEncoder, TabularSchema};
use crate::tape::Var;
use crate::temporal::TimesBlock;
use crate::tensor::{Real, Tensor};

/// Shapes of one input sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDims {
    pub eeg_len: usize,
    pub eeg_channels: usize,
    pub volume: [usize; 3],
    pub schema: TabularSchema,
}

impl InputDims {
    pub fn of(dataset: &Dataset) -> Self {
        let m = &dataset.manifest;
        Self {
            eeg_len: m.eeg.length,
            eeg_channels: m.eeg.channels,
            volume: m.volume.dims,
            schema: m.schema.clone(),
        }
    }

    pub fn check_compatible(&self, other: &InputDims) -> Result<()> {
        if self.schema != other.schema {
            return Err(Error::Incompatible("tabular schema differs from the checkpoint".into()));
        }
        if (self.eeg_len, self.eeg_channels) != (other.eeg_len, other.eeg_channels) {
            return Err(Error::Incompatible(format!(
                "EEG dims {}×{} differ from the checkpoint's {}×{}",
                other.eeg_len, other.eeg_channels, self.eeg_len, self.eeg_channels
            )));
        }
        if self.volume != other.volume {
            return Err(Error::Incompatible(format!(
                "volume dims {:?} differ from the checkpoint's {:?}",
                other.volume, self.volume
            )));
        }
        Ok(())
    }
}

/// Per-field mean and standard deviation of the numerical tabular fields,
/// fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            std: vec![1.0; k],
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("normalizer rows"))?;
        let k = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; k];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; k];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Fitted on the training samples of `dataset`.
    pub fn fit_train(dataset: &Dataset) -> Result<Self> {
        let schema = dataset.schema();
        let rows = dataset
            .split(crate::data::Split::Train)
            .iter()
            .map(|s| schema.encode(&s.tabular).map(|(n, _)| n))
            .collect::<Result<Vec<_>>>()?;
        if schema.numerical.is_empty() {
            return Ok(Self::identity(0));
        }
        Self::fit(&rows)
    }
}

/// One sample ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub numerical: Vec<T>,
    pub categorical: Vec<usize>,
    /// `[T × C]`
    pub eeg: Tensor<T>,
    /// `[1 × D × H × W]`, standardized.
    pub volume: Tensor<T>,
}

impl<T: Real> ModelInput<T> {
    pub fn prepare(sample: &Sample, schema: &TabularSchema, norm: &Normalizer) -> Result<Self> {
        let (num, categorical) = schema.encode(&sample.tabular)?;
        let vol = sample.volume.cast::<T>();
        let mut shape = vec![1];
        shape.extend_from_slice(vol.shape());
        Ok(Self {
            numerical: norm.apply(&num).into_iter().map(T::lit).collect(),
            categorical,
            eeg: sample.eeg.cast(),
            volume: imaging::standardize(&vol).reshaped(&shape)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Mstnet {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub tabular: TabularEncoder,
    pub times: Vec<TimesBlock>,
    pub eeg3d: EegTo3d,
    pub imaging: ImagingEncoder,
    pub head: FusionHead,
}

impl Mstnet {
    /// Builds the network and its freshly initialized parameters. Ablation
    /// switches in `config` decide which components exist.
    pub fn build<T: Real>(config: &ModelConfig, dims: &InputDims) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        dims.schema.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let tabular = TabularEncoder::new(
            &mut store,
            &mut init,
            &dims.schema,
            config.d_model,
            config.tab_layers,
            config.tab_heads,
            config.ff_mult,
            config.remove_first_norm,
            !config.no_feature_biases,
        )?;
        let times = if config.no_timesblock {
            Vec::new()
        } else {
            (0..config.times_blocks)
                .map(|i| {
                    TimesBlock::new(
                        &mut store,
                        &mut init,
                        i,
                        dims.eeg_channels,
                        config.k_top,
                        &config.inception_kernels,
                        config.amplitude_grad,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        let [a, b, c] = config.eeg3d_dims;
        let eeg3d = EegTo3d::new(
            &mut store,
            &mut init,
            dims.eeg_len,
            dims.eeg_channels,
            [config.eeg3d_channels, a, b, c],
        );
        let p = DenseBlockParams {
            growth_rate: config.growth_rate,
            layers_per_block: config.dense_layers,
            blocks: config.dense_blocks,
        };
        let imaging = if config.no_denseblock {
            ImagingEncoder::patch(&mut store, &mut init, 1, &p)
        } else {
            ImagingEncoder::dense(&mut store, &mut init, 1, &p)
        };
        imaging.check_dims(dims.volume)?;
        let head = FusionHead::new(
            &mut store,
            &mut init,
            &FusionDims {
                eeg_channels: config.eeg3d_channels,
                mri_channels: imaging.out_channels(),
                tab_width: config.d_model,
                d_f: config.fusion_dim,
                heads: config.fusion_heads,
                hidden: config.agg_hidden,
            },
            !config.no_cmaa,
        )?;
        let net = Self {
            config: config.without_paths(),
            dims: dims.clone(),
            tabular,
            times,
            eeg3d,
            imaging,
            head,
        };
        Ok((net, store))
    }

    /// Logits `[3]` for one sample.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, input: &ModelInput<T>) -> Result<Var> {
        let tab_cls = self.tabular.forward(ctx, &input.numerical, &input.categorical)?;
        let mut x = ctx.constant(input.eeg.clone());
        for block in &self.times {
            x = block.forward(ctx, x)?;
        }
        let eeg_volume = self.eeg3d.forward(ctx, x)?;
        let v = ctx.constant(input.volume.clone());
        let mri = self.imaging.forward(ctx, v)?;
        let feats = self.head.project(ctx, eeg_volume, mri, tab_cls)?;
        self.head.aggregate_and_classify(ctx, &feats)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba<T: Real>(&self, store: &ParamStore<T>, input: &ModelInput<T>) -> Result<[T; NUM_CLASSES]> {
        let mut ctx = Ctx::eval(store);
        let logits = self.forward(&mut ctx, input)?;
        let mut p = [T::zero(); NUM_CLASSES];
        p.copy_from_slice(ctx.graph.value(logits).data());
        crate::tape::softmax_in_place(&mut p);
        Ok(p)
    }
}

/// Index of the largest probability; ties go to the lower class.
pub fn argmax<T: Real>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}
