use std::collections::HashMap;

use rand::Rng;

use super::config::{Family, ModelConfig};
use super::ModelError;
use crate::engine::{Gradients, Graph, Tensor, Var};

/// One trainable layer and the shape of its weight.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Same-padded convolution, weight `[cout, cin, k, ..]`.
    Conv { cin: usize, cout: usize, kernel: usize },
    /// Factor-2 transposed convolution, weight `[cin, cout, 2, ..]`.
    UpConv { cin: usize, cout: usize },
    /// Weight `[fout, fin]`.
    Linear { fin: usize, fout: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    pub fn weight_shape(&self, spatial_dims: usize) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { cin, cout, kernel } => [vec![cout, cin], vec![kernel; spatial_dims]].concat(),
            LayerKind::UpConv { cin, cout } => [vec![cin, cout], vec![2; spatial_dims]].concat(),
            LayerKind::Linear { fin, fout } => vec![fout, fin],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cout, .. } | LayerKind::UpConv { cout, .. } => cout,
            LayerKind::Linear { fout, .. } => fout,
        }
    }

    /// Half-width `√k` of the uniform initialization law, with
    /// `k = 1 / (fan-in · kernel volume)` for convolutions and `1 / fan-in`
    /// for linear layers. Transposed convolutions use the weight's second
    /// axis (output channels) as fan-in, as the common deep-learning
    /// frameworks do.
    pub fn init_bound(&self, spatial_dims: usize) -> f64 {
        let k = match self.kind {
            LayerKind::Conv { cin, kernel, .. } => 1.0 / (cin * kernel.pow(spatial_dims as u32)) as f64,
            LayerKind::UpConv { cout, .. } => 1.0 / (cout << spatial_dims) as f64,
            LayerKind::Linear { fin, .. } => 1.0 / fin as f64,
        };
        k.sqrt()
    }
}

fn conv_block(layers: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize) {
    layers.push(LayerSpec::new(format!("{prefix}.conv_a"), LayerKind::Conv { cin, cout, kernel: 3 }));
    layers.push(LayerSpec::new(format!("{prefix}.conv_b"), LayerKind::Conv { cin: cout, cout, kernel: 3 }));
}

/// Contracting path with blocks at levels `0..=depth`.
fn encoder_layers(layers: &mut Vec<LayerSpec>, prefix: &str, cfg: &ModelConfig, cin: usize) {
    let u = &cfg.unet;
    let mut c = cin;
    for l in 0..=u.depth {
        conv_block(layers, &format!("{prefix}.enc{l}"), c, u.channels(l));
        c = u.channels(l);
    }
}

/// Layer inventory for `cfg`, in a fixed order.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let u = &cfg.unet;
    let mut layers = Vec::new();
    encoder_layers(&mut layers, "unet", cfg, cfg.in_channels);
    for l in (0..u.depth).rev() {
        layers.push(LayerSpec::new(
            format!("unet.dec{l}.up"),
            LayerKind::UpConv { cin: u.channels(l + 1), cout: u.channels(l) },
        ));
        conv_block(&mut layers, &format!("unet.dec{l}"), 2 * u.channels(l), u.channels(l));
    }
    let base = u.base_channels;
    let k = u.n_classes;
    let head = |cin: usize, cout: usize, name: &str| LayerSpec::new(name, LayerKind::Conv { cin, cout, kernel: 1 });
    match cfg.kind.family() {
        Family::ProbUnet => {
            layers.push(head(base + cfg.latent.dim, k, "head"));
            let top = u.channels(u.depth);
            for (net, cin) in [("prior", cfg.in_channels), ("posterior", cfg.in_channels + 1)] {
                encoder_layers(&mut layers, net, cfg, cin);
                layers.push(LayerSpec::new(
                    format!("{net}.out"),
                    LayerKind::Linear { fin: top, fout: 2 * cfg.latent.dim },
                ));
            }
        }
        Family::Mcdo => layers.push(head(base, k, "head")),
        Family::Ssn => {
            layers.push(head(base, k, "ssn.mu"));
            layers.push(head(base, k, "ssn.sigma"));
            layers.push(head(base, k * cfg.ssn_rank, "ssn.factor"));
        }
    }
    layers
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(ModelError::InvalidArgument(format!("duplicate parameter {name}")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors, index })
    }

    /// Every weight and bias of `layer_specs(cfg)` set to `value`.
    pub fn constant(cfg: &ModelConfig, value: f64) -> Self {
        Self::build(cfg, |_, _| value)
    }

    fn build(cfg: &ModelConfig, mut draw: impl FnMut(f64, usize) -> f64) -> Self {
        let sd = cfg.unet.spatial_dims;
        let mut entries = Vec::new();
        for layer in layer_specs(cfg) {
            let bound = layer.init_bound(sd);
            let shape = layer.weight_shape(sd);
            let n: usize = shape.iter().product();
            let w = (0..n).map(|i| draw(bound, i)).collect();
            entries.push((format!("{}.w", layer.name), Tensor::new(shape, w).expect("shape matches data")));
            let b = (0..layer.bias_len()).map(|i| draw(bound, i)).collect();
            entries.push((format!("{}.b", layer.name), Tensor::from_vec(b)));
        }
        Self::new(entries).expect("layer names are unique")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Checks names and shapes against the layout `cfg` expects.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let want = Self::constant(cfg, 0.0);
        if want.names != self.names {
            return Err(ModelError::InvalidArgument(format!(
                "parameter names do not match a {} model ({} expected, {} found)",
                cfg.kind,
                want.len(),
                self.len()
            )));
        }
        for ((n, a), b) in self.names.iter().zip(&self.tensors).zip(&want.tensors) {
            if a.shape() != b.shape() {
                return Err(ModelError::InvalidArgument(format!(
                    "{n}: shape {:?}, model expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor on `g`, trainable or constant.
    pub fn bind<'g>(&'g self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            graph: g,
            vars,
            index: &self.index,
        }
    }

    /// Constant binding except `name`, which is replaced by `var`.
    pub fn bind_with<'g>(&'g self, g: &'g Graph, name: &str, var: Var) -> Result<Bound<'g>, ModelError> {
        let i = self.position(name).ok_or_else(|| ModelError::InvalidArgument(format!("no parameter {name}")))?;
        let mut b = self.bind(g, false);
        b.vars[i] = var;
        Ok(b)
    }
}

/// Uniform `U(−√k, √k)` initialization of every weight and bias.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ModelParams {
    ModelParams::build(cfg, |bound, _| rng.random_range(-bound..=bound))
}

/// Parameters registered on one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: Vec<Var>,
    index: &'g HashMap<String, usize>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::InvalidArgument(format!("model has no parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_follow_fan_in() {
        let conv = LayerSpec::new("c", LayerKind::Conv { cin: 8, cout: 4, kernel: 3 });
        assert!((conv.init_bound(2) - 0.11785113019775792).abs() < 1e-12);
        let lin = LayerSpec::new("l", LayerKind::Linear { fin: 3, fout: 1 });
        assert!((lin.init_bound(2) - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn every_weight_respects_its_bound() {
        let cfg = ModelConfig::new(ModelKind::PulaskiHausdorff);
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let layers = layer_specs(&cfg);
        assert_eq!(p.len(), 2 * layers.len());
        for (l, pair) in layers.iter().zip(p.tensors().chunks(2)) {
            let bound = l.init_bound(2);
            let worst = pair.iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst <= bound, "{}: {worst} > {bound}", l.name);
        }
        p.check_layout(&cfg).unwrap();
    }

    #[test]
    fn uniform_draws_fill_the_interval() {
        let l = LayerSpec::new("c", LayerKind::Conv { cin: 8, cout: 4, kernel: 3 });
        let b = l.init_bound(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..100_000).map(|_| rng.random_range(-b..=b)).collect();
        let max = draws.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= b && max > 0.999 * b);
    }

    #[test]
    fn layouts_differ_by_family() {
        let names = |k| ModelParams::constant(&ModelConfig::new(k), 0.0).names().to_vec();
        assert!(names(ModelKind::ProbunetCe).iter().any(|n| n == "posterior.out.w"));
        assert!(!names(ModelKind::Mcdo).iter().any(|n| n.starts_with("prior")));
        assert!(names(ModelKind::Ssn).iter().any(|n| n == "ssn.factor.w"));
        let cfg = ModelConfig::new(ModelKind::Ssn);
        let p = ModelParams::constant(&cfg, 0.0);
        assert_eq!(p.get("ssn.factor.w").unwrap().shape(), &[20, 8, 1, 1]);
        assert!(p.check_layout(&ModelConfig::new(ModelKind::Mcdo)).is_err());
    }
}
