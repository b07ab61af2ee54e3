//! The dual network: selector and transformer composed into one
//! differentiable prediction step.

use rand::Rng;

use crate::alpha::AlphaMatrix;
use crate::error::Result;
use crate::layers::norm::BnMode;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::selector::{self, SelectorArch, SelectorCache, SelectorConfig, SelectorParams};
use crate::tensor::{Batch, Frame};
use crate::transformer::{self, DecomposeMode, TransformerCache, TransformerConfig, TransformerParams};

#[derive(Clone, Debug, PartialEq)]
pub struct DualNet<T> {
    pub transformer_config: TransformerConfig,
    pub selector_config: SelectorConfig,
    pub arch: SelectorArch,
    pub transformer: TransformerParams<T>,
    pub selector: SelectorParams<T>,
}

/// Gradient accumulator with the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DualGrads<T> {
    pub transformer: TransformerParams<T>,
    pub selector: SelectorParams<T>,
}

impl<T: Scalar> ParamSet<T> for DualGrads<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.transformer.visit(f);
        self.selector.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.transformer.visit_mut(f);
        self.selector.visit_mut(f);
    }
}

/// Trainable parameters of a [`DualNet`]. Selector parameters are included
/// even when the selector is disabled; their gradients are then zero.
impl<T: Scalar> ParamSet<T> for DualNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.transformer.visit(f);
        self.selector.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.transformer.visit_mut(f);
        self.selector.visit_mut(f);
    }
}

/// Cache of one batched prediction step.
#[derive(Clone, Debug)]
pub struct StepCache<T> {
    transformer: TransformerCache<T>,
    selector: Option<SelectorCache<T>>,
    alphas: Vec<AlphaMatrix<T>>,
}

impl<T: Scalar> StepCache<T> {
    pub fn output(&self) -> &Batch<T> {
        self.transformer.output()
    }

    pub fn alphas(&self) -> &[AlphaMatrix<T>] {
        &self.alphas
    }

    pub fn transformer(&self) -> &TransformerCache<T> {
        &self.transformer
    }
}

impl<T: Scalar> DualNet<T> {
    pub fn new<R: Rng + ?Sized>(transformer_config: TransformerConfig, selector_config: SelectorConfig, rng: &mut R) -> Result<Self> {
        for w in transformer_config.validate()? {
            log::warn!("{w}");
        }
        selector_config.validate(&transformer_config)?;
        let arch = selector_config.arch(&transformer_config);
        let transformer = TransformerParams::init(&transformer_config, rng);
        let selector = SelectorParams::init(&arch, rng);
        Ok(DualNet {
            transformer_config,
            selector_config,
            arch,
            transformer,
            selector,
        })
    }

    pub fn context(&self) -> usize {
        self.transformer_config.context
    }

    pub fn selector_enabled(&self) -> bool {
        self.selector_config.enabled
    }

    pub fn zero_grads(&self) -> DualGrads<T> {
        DualGrads {
            transformer: self.transformer.zeros_like(),
            selector: self.selector.zeros_like(),
        }
    }

    fn uniform_alphas(&self, batch: usize) -> Vec<AlphaMatrix<T>> {
        vec![AlphaMatrix::uniform(self.arch.rows, self.arch.columns); batch]
    }

    /// One prediction step for a batch of channel-stacked context windows.
    ///
    /// `mode` selects the selector's batch-norm statistics; train mode
    /// updates the running statistics.
    pub fn step_forward(&mut self, x: &Batch<T>, mode: BnMode) -> Result<StepCache<T>> {
        let (sel, alphas) = if self.selector_enabled() {
            let c = selector::forward_cached(x, &mut self.selector, &self.arch, &self.transformer_config, mode)?;
            let a = c.alphas().to_vec();
            (Some(c), a)
        } else {
            (None, self.uniform_alphas(x.batch))
        };
        let tc = transformer::forward_cached(x, Some(&alphas), &self.transformer, &self.transformer_config)?;
        Ok(StepCache {
            transformer: tc,
            selector: sel,
            alphas,
        })
    }

    /// Eval-mode step that does not touch any state.
    pub fn step_eval(&self, x: &Batch<T>) -> Result<(Batch<T>, Vec<AlphaMatrix<T>>)> {
        let alphas = self.select_eval(x)?;
        let out = transformer::forward(x, &alphas, &self.transformer, &self.transformer_config)?;
        Ok((out, alphas))
    }

    pub fn select_eval(&self, x: &Batch<T>) -> Result<Vec<AlphaMatrix<T>>> {
        if self.selector_enabled() {
            selector::forward_eval(x, &self.selector, &self.arch, &self.transformer_config)
        } else {
            Ok(self.uniform_alphas(x.batch))
        }
    }

    /// Backward through one step; accumulates into `grads` and returns the
    /// gradient w.r.t. the context planes (both networks combined).
    pub fn step_backward(&self, cache: &StepCache<T>, d_output: &Batch<T>, grads: &mut DualGrads<T>) -> Batch<T> {
        let tg = transformer::backward(
            &cache.transformer,
            d_output,
            &self.transformer,
            &self.transformer_config,
            &mut grads.transformer,
        );
        let mut dx = tg.input;
        if let (Some(sc), Some(d_scaled)) = (cache.selector.as_ref(), tg.scaled_alpha) {
            let n = T::from_usize(self.arch.columns).unwrap();
            let d_unscaled: Vec<Vec<T>> = d_scaled.into_iter().map(|v| v.into_iter().map(|g| g * n).collect()).collect();
            let ds = selector::backward(
                sc,
                &d_unscaled,
                &self.selector,
                &self.arch,
                &self.transformer_config,
                &mut grads.selector,
            );
            dx.add_assign(&ds);
        }
        dx
    }

    /// Predicts the next frame from exactly `context` frames (eval mode).
    pub fn predict_next(&self, frames: &[Frame<T>]) -> Result<(Frame<T>, AlphaMatrix<T>)> {
        let x = self.stack_window(frames)?;
        let (out, mut alphas) = self.step_eval(&x)?;
        Ok((out.frame(0), alphas.remove(0)))
    }

    /// Output-block decomposition of one eval-mode prediction.
    pub fn decompose(&self, frames: &[Frame<T>], mode: DecomposeMode) -> Result<Frame<T>> {
        let x = self.stack_window(frames)?;
        let alphas = self.select_eval(&x)?;
        Ok(transformer::decompose(&x, &alphas, &self.transformer, &self.transformer_config, mode)?.frame(0))
    }

    pub fn stack_window(&self, frames: &[Frame<T>]) -> Result<Batch<T>> {
        if frames.len() != self.context() {
            return Err(crate::Error::Argument(format!(
                "model needs {} context frames, got {}",
                self.context(),
                frames.len()
            )));
        }
        Batch::stack_channels(&[frames.iter().collect()])
    }

    /// Converts every parameter and buffer to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DualNet<U> {
        let mut rng = rand_chacha::ChaCha8Rng::from_seed_zero();
        let mut out = DualNet::<U>::new(self.transformer_config.clone(), self.selector_config.clone(), &mut rng)
            .expect("config already validated");
        let mut src = Vec::new();
        self.visit(&mut |_, v| src.push(v.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
        self.selector.visit_buffers(&mut |_, v| src.push(v.iter().map(|x| x.as_f64()).collect()));
        let mut it = src.into_iter();
        out.visit_mut(&mut |_, v| {
            for (d, s) in v.iter_mut().zip(it.next().unwrap()) {
                *d = U::lit(s);
            }
        });
        out.selector.visit_buffers_mut(&mut |_, v| {
            for (d, s) in v.iter_mut().zip(it.next().unwrap()) {
                *d = U::lit(s);
            }
        });
        out
    }
}

trait SeedZero {
    fn from_seed_zero() -> Self;
}

impl SeedZero for rand_chacha::ChaCha8Rng {
    fn from_seed_zero() -> Self {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    }
}
