use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// The four parts of the split U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    Decoder,
    Classifier,
    Adversary,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Classifier => "classifier",
            Part::Adversary => "adversary",
        }
    }

    pub fn parse(s: &str) -> Option<Part> {
        match s {
            "encoder" => Some(Part::Encoder),
            "decoder" => Some(Part::Decoder),
            "classifier" => Some(Part::Classifier),
            "adversary" => Some(Part::Adversary),
            _ => None,
        }
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Handle into a [`ParamArena`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One named parameter tensor with its gradient accumulator.
pub struct Param {
    pub name: String,
    pub part: Part,
    pub block: usize,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub frozen: bool,
}

/// Flat storage for every parameter of a model. Layers hold [`ParamId`]s,
/// so the optimizer, freezing and checkpointing all work off one list.
#[derive(Default)]
pub struct ParamArena {
    params: Vec<Param>,
}

impl ParamArena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, part: Part, block: usize, value: ArrayD<f32>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            part,
            block,
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].value
    }

    pub fn accum_grad(&mut self, id: ParamId, delta: &ArrayD<f32>) {
        self.params[id.0].grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
