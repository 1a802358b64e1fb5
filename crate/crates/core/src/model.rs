//! Networks, input domains and verification properties.
//!
//! A verification network is a sequence of affine layers (dense or conv2d)
//! with an implicit ReLU between consecutive layers and none after the last;
//! its output is a single scalar whose sign decides the property. Conv layers
//! keep their native kernels for evaluation but expose a cached explicit
//! linear view used by all bound and dual computations.

use std::ops::Deref;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense affine layer `x ↦ W·x + b`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// 2-D convolution over CHW-flattened inputs with square stride/zero padding.
/// Bias is per output channel.
#[derive(Debug)]
pub struct Conv2dLayer {
    pub kernel: Array4<f64>, // [out_c, in_c, kh, kw]
    pub bias: Array1<f64>,   // [out_c]
    pub stride: usize,
    pub padding: usize,
    pub in_shape: [usize; 3], // [c, h, w]
    linear_view: OnceLock<(Array2<f64>, Array1<f64>)>,
}

impl Clone for Conv2dLayer {
    fn clone(&self) -> Self {
        Conv2dLayer {
            kernel: self.kernel.clone(),
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
            in_shape: self.in_shape,
            linear_view: OnceLock::new(),
        }
    }
}

impl Conv2dLayer {
    pub fn new(
        kernel: Array4<f64>,
        bias: Array1<f64>,
        stride: usize,
        padding: usize,
        in_shape: [usize; 3],
    ) -> Result<Self> {
        let [c, h, w] = in_shape;
        let (out_c, in_c, kh, kw) = kernel.dim();
        if in_c != c {
            return Err(Error::ShapeMismatch {
                context: "conv2d input channels",
                expected: in_c,
                found: c,
            });
        }
        if bias.len() != out_c {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                expected: out_c,
                found: bias.len(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidNetwork("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidNetwork("conv2d kernel larger than padded input".into()));
        }
        Ok(Conv2dLayer {
            kernel,
            bias,
            stride,
            padding,
            in_shape,
            linear_view: OnceLock::new(),
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        let (out_c, _, kh, kw) = self.kernel.dim();
        let [_, h, w] = self.in_shape;
        let oh = (h + 2 * self.padding - kh) / self.stride + 1;
        let ow = (w + 2 * self.padding - kw) / self.stride + 1;
        [out_c, oh, ow]
    }

    pub fn in_dim(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.out_shape().iter().product()
    }

    /// Direct convolution over a CHW-flattened input.
    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        let [c, h, w] = self.in_shape;
        let [out_c, oh, ow] = self.out_shape();
        let (_, _, kh, kw) = self.kernel.dim();
        let mut out = Array1::zeros(out_c * oh * ow);
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let idx = ic * h * w + iy as usize * w + ix as usize;
                                acc += self.kernel[(oc, ic, ky, kx)] * x[idx];
                            }
                        }
                    }
                    out[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn materialize(&self) -> (Array2<f64>, Array1<f64>) {
        let [c, h, w] = self.in_shape;
        let [out_c, oh, ow] = self.out_shape();
        let (_, _, kh, kw) = self.kernel.dim();
        let mut mat = Array2::zeros((out_c * oh * ow, c * h * w));
        let mut bias = Array1::zeros(out_c * oh * ow);
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = oc * oh * ow + oy * ow + ox;
                    bias[row] = self.bias[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let col = ic * h * w + iy as usize * w + ix as usize;
                                mat[(row, col)] += self.kernel[(oc, ic, ky, kx)];
                            }
                        }
                    }
                }
            }
        }
        (mat, bias)
    }
}

/// One affine layer of a network.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
}

impl Layer {
    pub fn dense(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::ShapeMismatch {
                context: "dense bias",
                expected: weights.nrows(),
                found: bias.len(),
            });
        }
        Ok(Layer::Dense(DenseLayer { weights, bias }))
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.ncols(),
            Layer::Conv2d(c) => c.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.nrows(),
            Layer::Conv2d(c) => c.out_dim(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv2d(_))
    }

    /// Exact affine image of `x` under this layer.
    pub fn apply(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                context: "layer input",
                expected: self.in_dim(),
                found: x.len(),
            });
        }
        Ok(match self {
            Layer::Dense(d) => d.weights.dot(x) + &d.bias,
            Layer::Conv2d(c) => c.apply(x),
        })
    }

    /// Explicit matrix/bias view of the layer. For conv layers the view is
    /// materialized on first use and cached.
    pub fn linear_view(&self) -> (&Array2<f64>, &Array1<f64>) {
        match self {
            Layer::Dense(d) => (&d.weights, &d.bias),
            Layer::Conv2d(c) => {
                let (w, b) = c.linear_view.get_or_init(|| c.materialize());
                (w, b)
            }
        }
    }

    /// Structural fan-out: for each input neuron, the number of output
    /// neurons it connects to. Dense layers connect everything.
    pub fn fanout_counts(&self) -> Vec<usize> {
        match self {
            Layer::Dense(d) => vec![d.weights.nrows(); d.weights.ncols()],
            Layer::Conv2d(c) => {
                let (w, _) = self.linear_view();
                let mut counts = vec![0usize; c.in_dim()];
                let [out_c, _, _] = c.out_shape();
                let per_channel_rows = c.out_dim() / out_c;
                // Structural connectivity is channel-independent; count reachable
                // spatial positions once, then scale by output channels.
                for col in 0..c.in_dim() {
                    let mut n = 0usize;
                    for row in 0..per_channel_rows {
                        if self.connected(c, row, col) {
                            n += 1;
                        }
                    }
                    counts[col] = n * out_c;
                }
                let _ = w;
                counts
            }
        }
    }

    /// Structural fan-in: for each output neuron, the number of input neurons
    /// it connects to.
    pub fn fanin_counts(&self) -> Vec<usize> {
        match self {
            Layer::Dense(d) => vec![d.weights.ncols(); d.weights.nrows()],
            Layer::Conv2d(c) => {
                let [_, oh, ow] = c.out_shape();
                let [ci, h, w] = c.in_shape;
                let (_, _, kh, kw) = c.kernel.dim();
                let mut per_pos = vec![0usize; oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut n = 0usize;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    n += 1;
                                }
                            }
                        }
                        per_pos[oy * ow + ox] = n * ci;
                    }
                }
                let [out_c, _, _] = c.out_shape();
                let mut counts = Vec::with_capacity(c.out_dim());
                for _ in 0..out_c {
                    counts.extend_from_slice(&per_pos);
                }
                counts
            }
        }
    }

    fn connected(&self, c: &Conv2dLayer, spatial_row: usize, col: usize) -> bool {
        let [_, h, w] = c.in_shape;
        let [_, _, ow] = c.out_shape();
        let (_, _, kh, kw) = c.kernel.dim();
        let oy = spatial_row / ow;
        let ox = spatial_row % ow;
        let iy = (col % (h * w)) / w;
        let ix = col % w;
        for ky in 0..kh {
            for kx in 0..kw {
                let py = (oy * c.stride + ky) as isize - c.padding as isize;
                let px = (ox * c.stride + kx) as isize - c.padding as isize;
                if py == iy as isize && px == ix as isize {
                    return true;
                }
            }
        }
        false
    }
}

/// Explicit matrix/bias whose product reproduces a conv layer.
pub fn conv_as_linear(layer: &Layer) -> Result<(Array2<f64>, Array1<f64>)> {
    match layer {
        Layer::Conv2d(c) => Ok(c.materialize()),
        Layer::Dense(_) => Err(Error::InvalidNetwork(
            "conv_as_linear called on a dense layer".into(),
        )),
    }
}

/// A feed-forward network: affine layers with implicit ReLUs between them.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidNetwork("network depth must be >= 2".into()));
        }
        for i in 0..layers.len() - 1 {
            if layers[i].out_dim() != layers[i + 1].in_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {} output dim {} does not match layer {} input dim {}",
                    i + 1,
                    layers[i].out_dim(),
                    i + 2,
                    layers[i + 1].in_dim()
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of affine layers L.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Pre-activation dimension of layer `k` (1-based, `k = 1..=L`).
    pub fn layer_dim(&self, k: usize) -> usize {
        self.layers[k - 1].out_dim()
    }

    /// Weight/bias view of the affine map into layer `k` (1-based).
    pub fn layer_view(&self, k: usize) -> (&Array2<f64>, &Array1<f64>) {
        self.layers[k - 1].linear_view()
    }

    /// Exact forward pass with ReLU between layers and none after the last.
    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        let mut cur = self.layers[0].apply(x)?;
        for layer in &self.layers[1..] {
            cur.mapv_inplace(|v| v.max(0.0));
            cur = layer.apply(&cur)?;
        }
        Ok(cur)
    }
}

/// A network whose final layer output is exactly one scalar; the property
/// holds iff that scalar is nonnegative over the whole input domain.
#[derive(Debug, Clone)]
pub struct VerificationNetwork(Network);

impl VerificationNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let net = Network::new(layers)?;
        if net.output_dim() != 1 {
            return Err(Error::InvalidNetwork(format!(
                "verification network output dim must be 1, found {}",
                net.output_dim()
            )));
        }
        Ok(VerificationNetwork(net))
    }

    pub fn from_network(net: Network) -> Result<Self> {
        VerificationNetwork::new(net.layers)
    }
}

impl Deref for VerificationNetwork {
    type Target = Network;
    fn deref(&self) -> &Network {
        &self.0
    }
}

/// Exact scalar forward pass.
pub fn evaluate(net: &VerificationNetwork, x: &Array1<f64>) -> Result<f64> {
    Ok(net.forward(x)?[0])
}

/// Element-wise bounds of the input set (an ℓ∞ ball after clipping).
#[derive(Debug, Clone)]
pub struct InputDomain {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl InputDomain {
    pub fn new(lower: Array1<f64>, upper: Array1<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch {
                context: "input domain",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidProperty("domain lower > upper".into()));
        }
        Ok(InputDomain { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> Array1<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn clip(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut out = x.clone();
        for i in 0..out.len() {
            out[i] = out[i].clamp(self.lower[i], self.upper[i]);
        }
        out
    }

    pub fn contains(&self, x: &Array1<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

/// An adversarial robustness property on a base classifier.
#[derive(Debug, Clone)]
pub struct PropertySpec {
    pub network: Network,
    pub center: Array1<f64>,
    pub epsilon: f64,
    pub label: usize,
    pub adv_label: usize,
    pub clip: Option<(f64, f64)>,
}

/// Replace a classifier's last layer by the difference of two label rows,
/// so the result computes `(e_c − e_c')ᵀ f'(x)` as a single scalar.
pub fn merge_labels(net: &Network, label: usize, adv_label: usize) -> Result<VerificationNetwork> {
    let out_dim = net.output_dim();
    if label >= out_dim || adv_label >= out_dim {
        return Err(Error::InvalidProperty(format!(
            "labels ({label},{adv_label}) out of range for output dim {out_dim}"
        )));
    }
    if label == adv_label {
        return Err(Error::InvalidProperty("label equals adversarial label".into()));
    }
    let mut layers: Vec<Layer> = net.layers().to_vec();
    let last = layers.pop().expect("depth >= 2");
    let (w, b) = last.linear_view();
    let row = &w.row(label) - &w.row(adv_label);
    let bias = b[label] - b[adv_label];
    let merged = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape");
    layers.push(Layer::dense(merged, Array1::from(vec![bias]))?);
    VerificationNetwork::new(layers)
}

/// Merge a property into a scalar-output network plus input domain: the
/// property holds iff the merged output is nonnegative everywhere on the
/// ε-ball (intersected with the clip range).
pub fn merge_property(prop: &PropertySpec) -> Result<(VerificationNetwork, InputDomain)> {
    if !(prop.epsilon > 0.0) {
        return Err(Error::InvalidProperty("epsilon must be positive".into()));
    }
    if prop.center.len() != prop.network.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "property center",
            expected: prop.network.input_dim(),
            found: prop.center.len(),
        });
    }
    let net = merge_labels(&prop.network, prop.label, prop.adv_label)?;

    let mut lower = &prop.center - prop.epsilon;
    let mut upper = &prop.center + prop.epsilon;
    if let Some((lo, hi)) = prop.clip {
        lower.mapv_inplace(|v| v.clamp(lo, hi));
        upper.mapv_inplace(|v| v.clamp(lo, hi));
    }
    Ok((net, InputDomain::new(lower, upper)?))
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerFile {
    Dense {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
        in_shape: [usize; 3],
    },
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    layers: Vec<LayerFile>,
}

/// Property file: references the network file by path.
#[derive(Serialize, Deserialize)]
pub struct PropertyFile {
    pub network: String,
    pub center: Vec<f64>,
    pub epsilon: f64,
    pub label: usize,
    pub adv_label: usize,
    #[serde(default)]
    pub clip: Option<(f64, f64)>,
}

fn layer_to_file(layer: &Layer) -> LayerFile {
    match layer {
        Layer::Dense(d) => LayerFile::Dense {
            weights: d
                .weights
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            bias: d.bias.to_vec(),
        },
        Layer::Conv2d(c) => {
            let (oc, ic, kh, kw) = c.kernel.dim();
            let mut kernel = vec![vec![vec![vec![0.0; kw]; kh]; ic]; oc];
            for o in 0..oc {
                for i in 0..ic {
                    for y in 0..kh {
                        for x in 0..kw {
                            kernel[o][i][y][x] = c.kernel[(o, i, y, x)];
                        }
                    }
                }
            }
            LayerFile::Conv2d {
                kernel,
                bias: c.bias.to_vec(),
                stride: c.stride,
                padding: c.padding,
                in_shape: c.in_shape,
            }
        }
    }
}

fn layer_from_file(file: LayerFile) -> Result<Layer> {
    match file {
        LayerFile::Dense { weights, bias } => {
            let rows = weights.len();
            let cols = weights.first().map_or(0, |r| r.len());
            if rows == 0 || cols == 0 || weights.iter().any(|r| r.len() != cols) {
                return Err(Error::InvalidNetwork("ragged or empty dense weights".into()));
            }
            let flat: Vec<f64> = weights.into_iter().flatten().collect();
            let w = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| Error::InvalidNetwork(e.to_string()))?;
            Layer::dense(w, Array1::from(bias))
        }
        LayerFile::Conv2d {
            kernel,
            bias,
            stride,
            padding,
            in_shape,
        } => {
            let oc = kernel.len();
            let ic = kernel.first().map_or(0, |k| k.len());
            let kh = kernel.first().and_then(|k| k.first()).map_or(0, |k| k.len());
            let kw = kernel
                .first()
                .and_then(|k| k.first())
                .and_then(|k| k.first())
                .map_or(0, |k| k.len());
            if oc == 0 || ic == 0 || kh == 0 || kw == 0 {
                return Err(Error::InvalidNetwork("empty conv kernel".into()));
            }
            let mut arr = Array4::zeros((oc, ic, kh, kw));
            for (o, per_in) in kernel.iter().enumerate() {
                if per_in.len() != ic {
                    return Err(Error::InvalidNetwork("ragged conv kernel".into()));
                }
                for (i, rows) in per_in.iter().enumerate() {
                    if rows.len() != kh {
                        return Err(Error::InvalidNetwork("ragged conv kernel".into()));
                    }
                    for (y, row) in rows.iter().enumerate() {
                        if row.len() != kw {
                            return Err(Error::InvalidNetwork("ragged conv kernel".into()));
                        }
                        for (x, v) in row.iter().enumerate() {
                            arr[(o, i, y, x)] = *v;
                        }
                    }
                }
            }
            Ok(Layer::Conv2d(Conv2dLayer::new(
                arr,
                Array1::from(bias),
                stride,
                padding,
                in_shape,
            )?))
        }
    }
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let file = NetworkFile {
        layers: net.layers().iter().map(layer_to_file).collect(),
    };
    std::fs::write(path, crate::jsonfmt::to_string(&file)?)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    let file: NetworkFile = serde_json::from_str(&text)?;
    let layers = file
        .layers
        .into_iter()
        .map(layer_from_file)
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers)
}

/// Load a property file; the referenced network path is resolved relative to
/// the property file's directory when it is itself relative.
pub fn load_property(path: &Path) -> Result<PropertySpec> {
    let text = std::fs::read_to_string(path)?;
    let file: PropertyFile = serde_json::from_str(&text)?;
    let net_path = {
        let p = Path::new(&file.network);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            path.parent().unwrap_or_else(|| Path::new(".")).join(p)
        }
    };
    let network = load_network(&net_path)?;
    Ok(PropertySpec {
        network,
        center: Array1::from(file.center),
        epsilon: file.epsilon,
        label: file.label,
        adv_label: file.adv_label,
        clip: file.clip,
    })
}

pub fn save_property(prop: &PropertyFile, path: &Path) -> Result<()> {
    std::fs::write(path, crate::jsonfmt::to_string(prop)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_class_net() -> Network {
        Network::new(vec![
            Layer::dense(array![[1.0, 0.5], [-0.25, 1.0]], array![0.1, -0.1]).unwrap(),
            Layer::dense(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn merge_identity_rows() {
        let prop = PropertySpec {
            network: two_class_net(),
            center: array![0.5, 0.5],
            epsilon: 0.2,
            label: 0,
            adv_label: 1,
            clip: Some((0.0, 1.0)),
        };
        let (net, dom) = merge_property(&prop).unwrap();
        let (w, b) = net.layer_view(2);
        assert_eq!(w.shape(), &[1, 2]);
        assert_eq!(w[(0, 0)], 1.0);
        assert_eq!(w[(0, 1)], -1.0);
        assert_eq!(b[0], 0.0);
        assert_eq!(dom.lower, array![0.3, 0.3]);
        assert_eq!(dom.upper, array![0.7, 0.7]);
    }

    #[test]
    fn merge_clips_domain() {
        let prop = PropertySpec {
            network: two_class_net(),
            center: array![0.9, 0.9],
            epsilon: 0.2,
            label: 0,
            adv_label: 1,
            clip: Some((0.0, 1.0)),
        };
        let (_, dom) = merge_property(&prop).unwrap();
        assert_eq!(dom.upper, array![1.0, 1.0]);
        assert!((dom.lower[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn merge_rejects_equal_labels() {
        let prop = PropertySpec {
            network: two_class_net(),
            center: array![0.5, 0.5],
            epsilon: 0.2,
            label: 1,
            adv_label: 1,
            clip: None,
        };
        assert!(merge_property(&prop).is_err());
    }

    #[test]
    fn merged_output_equals_label_difference() {
        let prop = PropertySpec {
            network: two_class_net(),
            center: array![0.5, 0.5],
            epsilon: 0.2,
            label: 1,
            adv_label: 0,
            clip: Some((0.0, 1.0)),
        };
        let (net, dom) = merge_property(&prop).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x: Array1<f64> = (0..2)
                .map(|i| rng.gen_range(dom.lower[i]..=dom.upper[i]))
                .collect();
            let full = prop.network.forward(&x).unwrap();
            let merged = evaluate(&net, &x).unwrap();
            assert!((merged - (full[1] - full[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_single_dense_layer() {
        // Two layers so depth >= 2; second layer is identity.
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0, -1.0]], array![0.0]).unwrap(),
            Layer::dense(array![[1.0]], array![0.0]).unwrap(),
        ])
        .unwrap();
        // First layer output -0.5, ReLU blocks it, output 0. Check the raw
        // affine layer instead.
        let y = net.layers()[0].apply(&array![0.25, 0.75]).unwrap();
        assert_eq!(y[0], -0.5);
    }

    #[test]
    fn evaluate_matches_linear_composition_when_nonnegative() {
        let net = VerificationNetwork::new(vec![
            Layer::dense(array![[1.0, 0.0], [0.0, 1.0]], array![1.0, 1.0]).unwrap(),
            Layer::dense(array![[2.0, 3.0]], array![0.5]).unwrap(),
        ])
        .unwrap();
        // Inputs in [0,1]^2 keep pre-activations nonnegative.
        let x = array![0.25, 0.5];
        let expected = 2.0 * (0.25 + 1.0) + 3.0 * (0.5 + 1.0) + 0.5;
        assert!((evaluate(&net, &x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn evaluate_matches_linear_view_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_dense = |rows: usize, cols: usize| {
            let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0));
            let b = Array1::from_shape_fn(rows, |_| rng.gen_range(-0.5..0.5));
            Layer::dense(w, b).unwrap()
        };
        let net = VerificationNetwork::new(vec![
            rand_dense(5, 3),
            rand_dense(4, 5),
            rand_dense(1, 4),
        ])
        .unwrap();
        let mut inner = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = Array1::from_shape_fn(3, |_| inner.gen_range(-1.0..1.0));
            // Reference: explicit matrix composition with interleaved max(·,0).
            let mut cur = x.clone();
            for (i, layer) in net.layers().iter().enumerate() {
                let (w, b) = layer.linear_view();
                cur = w.dot(&cur) + b;
                if i + 1 < net.depth() {
                    cur.mapv_inplace(|v| v.max(0.0));
                }
            }
            assert!((evaluate(&net, &x).unwrap() - cur[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_is_piecewise_linear_within_activation_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w1 = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let b1 = Array1::from_shape_fn(6, |_| rng.gen_range(-0.2..0.2));
        let w2 = Array2::from_shape_fn((1, 6), |_| rng.gen_range(-1.0..1.0));
        let net = VerificationNetwork::new(vec![
            Layer::dense(w1, b1).unwrap(),
            Layer::dense(w2, array![0.0]).unwrap(),
        ])
        .unwrap();
        let pattern = |x: &Array1<f64>| -> Vec<bool> {
            net.layers()[0]
                .apply(x)
                .unwrap()
                .iter()
                .map(|v| *v > 0.0)
                .collect()
        };
        let mut checked = 0;
        for _ in 0..200 {
            let x = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
            let y = &x + &Array1::from_shape_fn(3, |_| rng.gen_range(-0.05..0.05));
            if pattern(&x) != pattern(&y) {
                continue;
            }
            let lam = rng.gen_range(0.0..1.0);
            let mid = &x * lam + &y * (1.0 - lam);
            if pattern(&mid) != pattern(&x) {
                continue;
            }
            let fx = evaluate(&net, &x).unwrap();
            let fy = evaluate(&net, &y).unwrap();
            let fm = evaluate(&net, &mid).unwrap();
            assert!((fm - (lam * fx + (1.0 - lam) * fy)).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn conv_one_by_one_kernel_is_scaled_identity() {
        let k = 2.5;
        let conv = Conv2dLayer::new(
            Array4::from_shape_fn((1, 1, 1, 1), |_| k),
            array![0.0],
            1,
            0,
            [1, 2, 2],
        )
        .unwrap();
        let (m, b) = conv.materialize();
        assert_eq!(m.shape(), &[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { k } else { 0.0 };
                assert_eq!(m[(i, j)], expected);
            }
        }
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_identity_center_kernel_padding_one_is_identity() {
        let mut kernel = Array4::zeros((1, 1, 3, 3));
        kernel[(0, 0, 1, 1)] = 1.0;
        let conv = Conv2dLayer::new(kernel, array![0.0], 1, 1, [1, 3, 3]).unwrap();
        let (m, _) = conv.materialize();
        assert_eq!(m.shape(), &[9, 9]);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(m[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn conv_linear_view_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = Array4::from_shape_fn((3, 2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let bias = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let conv = Conv2dLayer::new(kernel, bias, 2, 1, [2, 4, 4]).unwrap();
        let (m, b) = conv.materialize();
        for _ in 0..10 {
            let x = Array1::from_shape_fn(32, |_| rng.gen_range(-1.0..1.0));
            let direct = conv.apply(&x);
            let linear = m.dot(&x) + &b;
            let err = (&direct - &linear).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err <= 1e-12, "max error {err}");
        }
    }

    #[test]
    fn conv_fan_counts_match_linear_view_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kernel = Array4::from_shape_fn((2, 1, 3, 3), |_| rng.gen_range(0.5..1.0));
        let conv = Conv2dLayer::new(kernel, array![0.0, 0.0], 1, 1, [1, 4, 4]).unwrap();
        let layer = Layer::Conv2d(conv);
        let (m, _) = layer.linear_view();
        let fanout = layer.fanout_counts();
        let fanin = layer.fanin_counts();
        for col in 0..m.ncols() {
            let structural = m.column(col).iter().filter(|v| **v != 0.0).count();
            assert_eq!(fanout[col], structural);
        }
        for row in 0..m.nrows() {
            let structural = m.row(row).iter().filter(|v| **v != 0.0).count();
            assert_eq!(fanin[row], structural);
        }
    }

    #[test]
    fn network_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = Array4::from_shape_fn((2, 1, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let conv = Conv2dLayer::new(kernel, array![0.1, -0.2], 1, 0, [1, 3, 3]).unwrap();
        let dense = Layer::dense(
            Array2::from_shape_fn((1, 8), |_| rng.gen_range(-1.0..1.0)),
            array![0.3],
        )
        .unwrap();
        let net = Network::new(vec![Layer::Conv2d(conv), dense]).unwrap();
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        let x = Array1::from_shape_fn(9, |_| rng.gen_range(-1.0..1.0));
        assert_eq!(net.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        // Determinism: saving the loaded network reproduces the same bytes.
        let path2 = dir.path().join("net2.json");
        save_network(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
