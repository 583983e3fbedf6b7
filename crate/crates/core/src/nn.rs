//! Network layers built on the tape: temporal and color convolutions,
//! width max pooling, the 1D inception block, global max pooling over the
//! valid width, dense, dropout and softmax.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvPadding, Tape, Tensor, Var};

/// Batch of feature maps `[batch × channels × height × width]` together
/// with each example's used width. Columns at or beyond `valid_w[b]` are
/// padding: they hold zeros and never influence any layer output.
#[derive(Clone, Debug)]
pub struct ActivationMap {
    pub data: Var,
    pub valid_w: Vec<usize>,
}

impl ActivationMap {
    pub fn new(tape: &Tape, data: Var, valid_w: Vec<usize>) -> Result<Self> {
        let shape = tape.shape(data);
        if shape.len() != 4 {
            return Err(shape_err!("activation map must be rank 4, got {shape:?}"));
        }
        if valid_w.len() != shape[0] || valid_w.iter().any(|&v| v > shape[3]) {
            return Err(shape_err!("valid widths {valid_w:?} do not fit {shape:?}"));
        }
        Ok(Self { data, valid_w })
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[1]
    }

    pub fn height(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[2]
    }

    pub fn width(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_w: usize,
    pub padding: ConvPadding,
}

impl ConvSpec {
    /// `1 × kernel_w` convolution along time with same-width padding.
    pub fn temporal(
        in_channels: usize,
        out_channels: usize,
        kernel_w: usize,
        stride_w: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: 1,
            kernel_w,
            stride_w,
            padding: ConvPadding::Same,
        }
    }

    /// `4 × 1` valid convolution merging the four band rows.
    pub fn color(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: 4,
            kernel_w: 1,
            stride_w: 1,
            padding: ConvPadding::Valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && matches!(self.stride_w, 1 | 2)
            && self.kernel_w % 2 == 1
            && match self.kernel_h {
                1 => self.padding == ConvPadding::Same,
                4 => self.padding == ConvPadding::Valid && self.stride_w == 1 && self.kernel_w == 1,
                _ => false,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid convolution {self:?}")))
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Xavier fans: channels times kernel area.
    pub fn fans(&self) -> (usize, usize) {
        let area = self.kernel_h * self.kernel_w;
        (self.in_channels * area, self.out_channels * area)
    }
}

/// Parameters of one convolution as bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
}

fn conv(
    tape: &mut Tape,
    x: &ActivationMap,
    spec: &ConvSpec,
    p: ConvParams,
) -> Result<ActivationMap> {
    let c = x.channels(tape);
    if c != spec.in_channels {
        return Err(shape_err!(
            "convolution expects {} channels, got {c}",
            spec.in_channels
        ));
    }
    let wshape = tape.shape(p.weight);
    if wshape != spec.weight_shape() {
        return Err(shape_err!(
            "weight {wshape:?} does not match {:?}",
            spec.weight_shape()
        ));
    }
    let (data, valid_w) = tape.conv2d(
        x.data,
        p.weight,
        p.bias,
        spec.stride_w,
        spec.padding,
        Some(&x.valid_w),
    )?;
    Ok(ActivationMap { data, valid_w })
}

/// Temporal `1×k` convolution (pre-activation). Height is preserved and
/// the valid width becomes `⌈valid_w / stride⌉`.
pub fn conv_temporal(
    tape: &mut Tape,
    x: &ActivationMap,
    spec: &ConvSpec,
    p: ConvParams,
) -> Result<ActivationMap> {
    if spec.kernel_h != 1 {
        return Err(shape_err!("temporal convolution needs kernel height 1"));
    }
    conv(tape, x, spec, p)
}

/// Color convolution collapsing four band rows into one (pre-activation).
pub fn conv_color(
    tape: &mut Tape,
    x: &ActivationMap,
    spec: &ConvSpec,
    p: ConvParams,
) -> Result<ActivationMap> {
    let h = x.height(tape);
    if h != 4 || spec.kernel_h != 4 {
        return Err(shape_err!("color convolution needs height 4, got {h}"));
    }
    conv(tape, x, spec, p)
}

/// Width-3 sliding maximum with stride 1 or 2.
pub fn maxpool_temporal(
    tape: &mut Tape,
    x: &ActivationMap,
    stride_w: usize,
) -> Result<ActivationMap> {
    let (data, valid_w) = tape.maxpool_width(x.data, 3, stride_w, Some(&x.valid_w))?;
    Ok(ActivationMap { data, valid_w })
}

/// Branch widths of a 1D inception block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InceptionSpec {
    pub in_channels: usize,
    /// 1×1 branch
    pub b1: usize,
    /// 1×1 reduction feeding the 1×3 branch
    pub b3r: usize,
    pub b3: usize,
    /// 1×1 reduction feeding the 1×5 branch
    pub b5r: usize,
    pub b5: usize,
    /// 1×1 after the pooling branch
    pub pp: usize,
    pub stride_w: usize,
}

impl InceptionSpec {
    /// Splits `out` channels over the branches as 1/4, 3/8, 1/4 and the
    /// remainder for the pooling branch.
    pub fn balanced(in_channels: usize, out: usize, stride_w: usize) -> Self {
        let b1 = (out / 4).max(1);
        let b3 = (3 * out / 8).max(1);
        let b5 = (out / 4).max(1);
        let pp = out.saturating_sub(b1 + b3 + b5).max(1);
        Self {
            in_channels,
            b1,
            b3r: (out / 4).max(1),
            b3,
            b5r: (out / 8).max(1),
            b5,
            pp,
            stride_w,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.pp
    }

    /// The six convolutions in parameter order: 1×1, 3-reduce, 1×3,
    /// 5-reduce, 1×5, pool-projection.
    pub fn convs(&self) -> [ConvSpec; 6] {
        let (c, s) = (self.in_channels, self.stride_w);
        [
            ConvSpec::temporal(c, self.b1, 1, s),
            ConvSpec::temporal(c, self.b3r, 1, 1),
            ConvSpec::temporal(self.b3r, self.b3, 3, s),
            ConvSpec::temporal(c, self.b5r, 1, 1),
            ConvSpec::temporal(self.b5r, self.b5, 5, s),
            ConvSpec::temporal(c, self.pp, 1, 1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.in_channels,
            self.b1,
            self.b3r,
            self.b3,
            self.b5r,
            self.b5,
            self.pp,
        ];
        if counts.contains(&0) || !matches!(self.stride_w, 1 | 2) {
            return Err(Error::Config(format!("invalid inception block {self:?}")));
        }
        Ok(())
    }
}

/// Four-branch inception block; every convolution is followed by ReLU and
/// the branches are concatenated along channels. With stride 2 the 1×1,
/// 1×3, 1×5 convolutions and the pooling itself are strided, so all
/// branches end at width `⌈W/2⌉`.
pub fn inception_forward(
    tape: &mut Tape,
    x: &ActivationMap,
    spec: &InceptionSpec,
    params: &[ConvParams; 6],
) -> Result<ActivationMap> {
    spec.validate()?;
    let convs = spec.convs();
    let relu_conv = |tape: &mut Tape, input: &ActivationMap, i: usize| -> Result<ActivationMap> {
        let pre = conv_temporal(tape, input, &convs[i], params[i])?;
        Ok(ActivationMap {
            data: tape.relu(pre.data),
            valid_w: pre.valid_w,
        })
    };
    let one = relu_conv(tape, x, 0)?;
    let r3 = relu_conv(tape, x, 1)?;
    let three = relu_conv(tape, &r3, 2)?;
    let r5 = relu_conv(tape, x, 3)?;
    let five = relu_conv(tape, &r5, 4)?;
    let pooled = maxpool_temporal(tape, x, spec.stride_w)?;
    let proj = relu_conv(tape, &pooled, 5)?;
    let data = tape.concat(&[one.data, three.data, five.data, proj.data], 1)?;
    Ok(ActivationMap {
        data,
        valid_w: one.valid_w,
    })
}

/// Per-channel maximum over height and valid width: `[batch × channels]`.
pub fn global_max_pool(tape: &mut Tape, x: &ActivationMap) -> Result<Var> {
    tape.masked_global_max(x.data, Some(&x.valid_w))
}

/// `x · W + b` for `x` [batch×in], `W` [in×out], `b` [out].
pub fn dense(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let batch = tape.shape(x)[0];
    let out = tape.shape(weight).get(1).copied().unwrap_or(0);
    if tape.shape(bias) != [out] {
        return Err(shape_err!(
            "dense bias {:?} for {out} outputs",
            tape.shape(bias)
        ));
    }
    let xw = tape.matmul(x, weight)?;
    let ones = tape.constant(Tensor::full(&[batch, 1], 1.0));
    let b_row = tape.reshape(bias, &[1, out])?;
    let bias_rows = tape.matmul(ones, b_row)?;
    tape.add(xw, bias_rows)
}

/// Inverted dropout: in training each unit is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; in inference this is
/// the identity.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let m = tape.constant(Tensor::from_parts(shape, mask));
    tape.mul(x, m)
}

pub fn softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.softmax(x)
}
