use crate::error::{Error, Result};

/// Shape of the multiscale coupling flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowArchitecture {
    pub levels: usize,
    pub steps_per_level: usize,
    pub coupling_hidden_width: usize,
    pub coupling_hidden_layers: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for FlowArchitecture {
    fn default() -> Self {
        Self {
            levels: 3,
            steps_per_level: 7,
            coupling_hidden_width: 64,
            coupling_hidden_layers: 2,
            input_height: 32,
            input_width: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerKind {
    Squeeze,
    ActNorm,
    Mix,
    /// `flip` selects which channel half conditions the other.
    Coupling { flip: bool },
    /// Moves the upper half of the channels into the latent vector.
    Split,
}

/// One entry of the layer table. `channels`, `height`, `width` describe the
/// layer input; `offset..offset + len` is its slice of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub kind: LayerKind,
    pub level: usize,
    pub step: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpec {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn describe(&self) -> String {
        let kind = match self.kind {
            LayerKind::Squeeze => "squeeze",
            LayerKind::ActNorm => "actnorm",
            LayerKind::Mix => "1x1 mixing",
            LayerKind::Coupling { .. } => "affine coupling",
            LayerKind::Split => "split",
        };
        format!("level {} step {} {kind}", self.level, self.step)
    }
}

/// Convolution shapes inside one coupling subnetwork, input to output.
pub(crate) fn coupling_convs(arch: &FlowArchitecture, channels: usize) -> Vec<(usize, usize)> {
    let half = channels / 2;
    let width = arch.coupling_hidden_width;
    let mut convs = vec![(half, width)];
    for _ in 1..arch.coupling_hidden_layers {
        convs.push((width, width));
    }
    convs.push((width, channels));
    convs
}

pub(crate) fn conv_param_len(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}

impl FlowArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.steps_per_level == 0 {
            return Err(Error::Config("steps_per_level must be at least 1".into()));
        }
        if self.coupling_hidden_width == 0 || self.coupling_hidden_layers == 0 {
            return Err(Error::Config(
                "coupling hidden width and layer count must be positive".into(),
            ));
        }
        if self.levels >= usize::BITS as usize {
            return Err(Error::Config(format!("{} levels is absurd", self.levels)));
        }
        let factor = 1usize << self.levels;
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % factor != 0
            || self.input_width % factor != 0
        {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} = {factor}",
                self.input_height, self.input_width, self.levels
            )));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.input_height * self.input_width
    }

    pub(crate) fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut channels = 1;
        let mut height = self.input_height;
        let mut width = self.input_width;
        let mut push = |kind, level, step, c, h, w, len: usize, offset: &mut usize| {
            layers.push(LayerSpec {
                kind,
                level,
                step,
                channels: c,
                height: h,
                width: w,
                offset: *offset,
                len,
            });
            *offset += len;
        };
        for level in 0..self.levels {
            push(LayerKind::Squeeze, level, 0, channels, height, width, 0, &mut offset);
            channels *= 4;
            height /= 2;
            width /= 2;
            for step in 0..self.steps_per_level {
                let c = channels;
                push(LayerKind::ActNorm, level, step, c, height, width, 2 * c, &mut offset);
                push(LayerKind::Mix, level, step, c, height, width, c * c, &mut offset);
                let len = coupling_convs(self, c)
                    .iter()
                    .map(|&(i, o)| conv_param_len(i, o))
                    .sum();
                let kind = LayerKind::Coupling { flip: step % 2 == 1 };
                push(kind, level, step, c, height, width, len, &mut offset);
            }
            if level + 1 < self.levels {
                push(LayerKind::Split, level, self.steps_per_level, channels, height, width, 0, &mut offset);
                channels /= 2;
            }
        }
        layers
    }

    /// Human-readable name of the layer owning parameter `index`.
    pub(crate) fn describe_parameter(&self, index: usize) -> String {
        self.layers()
            .into_iter()
            .find(|l| (l.offset..l.offset + l.len).contains(&index))
            .map_or_else(|| format!("parameter {index}"), |l| l.describe())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().last().map_or(0, |l| l.offset + l.len)
    }
}
