//! Small vision transformer with attachable parallel branches.
//!
//! Layout per image: the pixels are cut into non-overlapping patches, each
//! patch is linearly projected to `dim`, a learned class token is prepended
//! and positional embeddings are added. Blocks are pre-norm: attention with
//! a residual, then a GELU MLP with a residual. The image's feature is the
//! class-token row after the last block; per-task classifier heads map it
//! to logits, concatenated in task order.
//!
//! During an incremental task, selected host linears (the attention output
//! projection and both MLP linears of the later blocks) each carry a
//! bias-free branch matrix psi; the site computes host(x) + lambda*(x psi).
//! Branches start at zero so the expanded model is exactly the frozen one.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometry and capacity of the transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// First block index that accepts branches; earlier blocks stay plain.
    pub incremental_from: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            dim: 64,
            heads: 4,
            blocks: 6,
            mlp_ratio: 4,
            incremental_from: 2,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Model(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Model(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Model("zero-sized model".into()));
        }
        if self.incremental_from > self.blocks {
            return Err(Error::Model(format!(
                "incremental_from {} exceeds {} blocks",
                self.incremental_from, self.blocks
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Token count per image, class token included.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_pixels(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Weight matrix [in x out] plus bias row [1 x out].
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SABlock<T: Element> {
    pub ln1: LayerNorm<T>,
    pub ln2: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wproj: Linear<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct PatchEmbedder<T: Element> {
    pub proj: Linear<T>,
    /// Positional embedding, one row per token.
    pub pos: Tensor<T>,
    pub cls: Tensor<T>,
}

/// Host linears that can carry a parallel branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    Proj,
    Mlp1,
    Mlp2,
}

impl std::fmt::Display for SiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SiteKind::Proj => write!(f, "proj"),
            SiteKind::Mlp1 => write!(f, "mlp1"),
            SiteKind::Mlp2 => write!(f, "mlp2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub block: usize,
    pub kind: SiteKind,
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind)
    }
}

/// The branches attached for the task currently in training.
#[derive(Debug, Clone)]
pub struct ExFusionSet<T: Element> {
    pub lambda: T,
    pub branches: Vec<(Site, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead<T: Element> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> ClassifierHead<T> {
    pub fn classes(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone)]
pub struct IncrementalViT<T: Element> {
    pub shape: ModelShape,
    pub embed: PatchEmbedder<T>,
    pub blocks: Vec<SABlock<T>>,
    pub heads: Vec<ClassifierHead<T>>,
    pub exfusion: Option<ExFusionSet<T>>,
}

/// Tape handles produced by one forward pass: per-image features, logits
/// over all classes seen so far, and a leaf per parameter in the same order
/// as [`IncrementalViT::named_params`].
pub struct ForwardPass {
    pub features: Var,
    pub logits: Var,
    pub params: Vec<(String, Var)>,
}

fn trunc_normal<T: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        // resample outside two standard deviations
        let x = loop {
            let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.random();
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
            if n.abs() <= 2.0 * std {
                break n;
            }
        };
        *v = T::from_f64(x);
    }
    t
}

fn init_linear<T: Element>(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Linear<T> {
    Linear {
        w: trunc_normal(rng, vec![din, dout], 0.02),
        b: Tensor::zeros(vec![1, dout]),
    }
}

fn init_ln<T: Element>(dim: usize) -> LayerNorm<T> {
    LayerNorm {
        gamma: Tensor::full(vec![1, dim], T::one()),
        beta: Tensor::zeros(vec![1, dim]),
    }
}

impl<T: Element> IncrementalViT<T> {
    /// Fresh backbone with no classifier heads. Parameter draws happen in
    /// the fixed `named_params` order so a seed pins every weight.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = rng::stream(seed, 0, "init");
        let d = shape.dim;
        let embed = PatchEmbedder {
            proj: init_linear(&mut rng, shape.patch_pixels(), d),
            pos: trunc_normal(&mut rng, vec![shape.tokens(), d], 0.02),
            cls: trunc_normal(&mut rng, vec![1, d], 0.02),
        };
        let mut blocks = Vec::with_capacity(shape.blocks);
        for _ in 0..shape.blocks {
            blocks.push(SABlock {
                ln1: init_ln(d),
                ln2: init_ln(d),
                wq: init_linear(&mut rng, d, d),
                wk: init_linear(&mut rng, d, d),
                wv: init_linear(&mut rng, d, d),
                wproj: init_linear(&mut rng, d, d),
                mlp1: init_linear(&mut rng, d, d * shape.mlp_ratio),
                mlp2: init_linear(&mut rng, d * shape.mlp_ratio, d),
            });
        }
        let mut model = IncrementalViT {
            shape,
            embed,
            blocks,
            heads: Vec::new(),
            exfusion: None,
        };
        model.set_backbone_trainable(true);
        Ok(model)
    }

    /// Total classes across all heads.
    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes()).sum()
    }

    /// Add a head for `new_classes` more classes; earlier heads are kept.
    pub fn expand_classifier(&mut self, new_classes: usize, seed: u64, task: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Model("cannot expand classifier by zero classes".into()));
        }
        let mut rng = rng::stream(seed, task, "head-init");
        let mut w: Tensor<T> = trunc_normal(&mut rng, vec![self.shape.dim, new_classes], 0.02);
        let mut b: Tensor<T> = Tensor::zeros(vec![1, new_classes]);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        self.heads.push(ClassifierHead { w, b });
        Ok(())
    }

    /// Sites eligible for branches under this shape's attachment pattern.
    pub fn default_sites(&self) -> Vec<Site> {
        let mut sites = Vec::new();
        for block in self.shape.incremental_from..self.shape.blocks {
            for kind in [SiteKind::Proj, SiteKind::Mlp1, SiteKind::Mlp2] {
                sites.push(Site { block, kind });
            }
        }
        sites
    }

    pub fn host_weight(&self, site: Site) -> Result<&Tensor<T>> {
        let block = self
            .blocks
            .get(site.block)
            .ok_or_else(|| Error::Model(format!("no block {}", site.block)))?;
        Ok(match site.kind {
            SiteKind::Proj => &block.wproj.w,
            SiteKind::Mlp1 => &block.mlp1.w,
            SiteKind::Mlp2 => &block.mlp2.w,
        })
    }

    pub fn host_weight_mut(&mut self, site: Site) -> Result<&mut Tensor<T>> {
        let block = self
            .blocks
            .get_mut(site.block)
            .ok_or_else(|| Error::Model(format!("no block {}", site.block)))?;
        Ok(match site.kind {
            SiteKind::Proj => &mut block.wproj.w,
            SiteKind::Mlp1 => &mut block.mlp1.w,
            SiteKind::Mlp2 => &mut block.mlp2.w,
        })
    }

    /// Attach zero-initialized trainable branches at the given sites.
    pub fn attach_exfusion(&mut self, lambda: T, sites: &[Site]) -> Result<()> {
        if self.exfusion.is_some() {
            return Err(Error::Model("branches already attached".into()));
        }
        if lambda.to_f64() <= 0.0 {
            return Err(Error::Model(format!("lambda must be positive, got {lambda}")));
        }
        let mut branches = Vec::with_capacity(sites.len());
        for &site in sites {
            if site.block < self.shape.incremental_from {
                return Err(Error::Model(format!("{site} is not an incremental block")));
            }
            let host = self.host_weight(site)?;
            let mut psi = Tensor::zeros(host.shape().to_vec());
            psi.set_requires_grad(true);
            branches.push((site, psi));
        }
        self.exfusion = Some(ExFusionSet { lambda, branches });
        Ok(())
    }

    pub fn take_exfusion(&mut self) -> Option<ExFusionSet<T>> {
        self.exfusion.take()
    }

    fn branch_for(&self, site: Site) -> Option<(&Tensor<T>, T)> {
        self.exfusion.as_ref().and_then(|set| {
            set.branches
                .iter()
                .find(|(s, _)| *s == site)
                .map(|(_, psi)| (psi, set.lambda))
        })
    }

    /// Flip the trainable flag on every backbone parameter (embedder and
    /// blocks); heads and branches are unaffected.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        let e = &mut self.embed;
        for t in [&mut e.proj.w, &mut e.proj.b, &mut e.pos, &mut e.cls] {
            t.set_requires_grad(trainable);
        }
        for b in &mut self.blocks {
            for t in [
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.wq.w,
                &mut b.wq.b,
                &mut b.wk.w,
                &mut b.wk.b,
                &mut b.wv.w,
                &mut b.wv.b,
                &mut b.wproj.w,
                &mut b.wproj.b,
                &mut b.mlp1.w,
                &mut b.mlp1.b,
                &mut b.mlp2.w,
                &mut b.mlp2.b,
            ] {
                t.set_requires_grad(trainable);
            }
        }
    }

    pub fn backbone_param_count(&self) -> usize {
        let e = &self.embed;
        let mut n = e.proj.w.numel() + e.proj.b.numel() + e.pos.numel() + e.cls.numel();
        for b in &self.blocks {
            n += b.ln1.gamma.numel()
                + b.ln1.beta.numel()
                + b.ln2.gamma.numel()
                + b.ln2.beta.numel()
                + b.wq.w.numel()
                + b.wq.b.numel()
                + b.wk.w.numel()
                + b.wk.b.numel()
                + b.wv.w.numel()
                + b.wv.b.numel()
                + b.wproj.w.numel()
                + b.wproj.b.numel()
                + b.mlp1.w.numel()
                + b.mlp1.b.numel()
                + b.mlp2.w.numel()
                + b.mlp2.b.numel();
        }
        n
    }

    /// Every parameter with a stable name, in a fixed order: embedder,
    /// blocks, heads, then any attached branches.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        let e = &self.embed;
        out.push(("embed.proj.w".into(), &e.proj.w));
        out.push(("embed.proj.b".into(), &e.proj.b));
        out.push(("embed.pos".into(), &e.pos));
        out.push(("embed.cls".into(), &e.cls));
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.gamma", &b.ln1.gamma),
                ("ln1.beta", &b.ln1.beta),
                ("ln2.gamma", &b.ln2.gamma),
                ("ln2.beta", &b.ln2.beta),
                ("wq.w", &b.wq.w),
                ("wq.b", &b.wq.b),
                ("wk.w", &b.wk.w),
                ("wk.b", &b.wk.b),
                ("wv.w", &b.wv.w),
                ("wv.b", &b.wv.b),
                ("wproj.w", &b.wproj.w),
                ("wproj.b", &b.wproj.b),
                ("mlp1.w", &b.mlp1.w),
                ("mlp1.b", &b.mlp1.b),
                ("mlp2.w", &b.mlp2.w),
                ("mlp2.b", &b.mlp2.b),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.w"), &h.w));
            out.push((format!("head{i}.b"), &h.b));
        }
        if let Some(set) = &self.exfusion {
            for (site, psi) in &set.branches {
                out.push((format!("ex.{site}"), psi));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        let e = &mut self.embed;
        out.push(("embed.proj.w".into(), &mut e.proj.w));
        out.push(("embed.proj.b".into(), &mut e.proj.b));
        out.push(("embed.pos".into(), &mut e.pos));
        out.push(("embed.cls".into(), &mut e.cls));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1.gamma", &mut b.ln1.gamma),
                ("ln1.beta", &mut b.ln1.beta),
                ("ln2.gamma", &mut b.ln2.gamma),
                ("ln2.beta", &mut b.ln2.beta),
                ("wq.w", &mut b.wq.w),
                ("wq.b", &mut b.wq.b),
                ("wk.w", &mut b.wk.w),
                ("wk.b", &mut b.wk.b),
                ("wv.w", &mut b.wv.w),
                ("wv.b", &mut b.wv.b),
                ("wproj.w", &mut b.wproj.w),
                ("wproj.b", &mut b.wproj.b),
                ("mlp1.w", &mut b.mlp1.w),
                ("mlp1.b", &mut b.mlp1.b),
                ("mlp2.w", &mut b.mlp2.w),
                ("mlp2.b", &mut b.mlp2.b),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}.w"), &mut h.w));
            out.push((format!("head{i}.b"), &mut h.b));
        }
        if let Some(set) = &mut self.exfusion {
            for (site, psi) in &mut set.branches {
                out.push((format!("ex.{site}"), psi));
            }
        }
        out
    }

    /// Copy the model into another storage precision.
    pub fn cast<U: Element>(&self) -> IncrementalViT<U> {
        let cl = |l: &Linear<T>| Linear {
            w: l.w.cast::<U>(),
            b: l.b.cast::<U>(),
        };
        IncrementalViT {
            shape: self.shape.clone(),
            embed: PatchEmbedder {
                proj: cl(&self.embed.proj),
                pos: self.embed.pos.cast(),
                cls: self.embed.cls.cast(),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| SABlock {
                    ln1: LayerNorm {
                        gamma: b.ln1.gamma.cast(),
                        beta: b.ln1.beta.cast(),
                    },
                    ln2: LayerNorm {
                        gamma: b.ln2.gamma.cast(),
                        beta: b.ln2.beta.cast(),
                    },
                    wq: cl(&b.wq),
                    wk: cl(&b.wk),
                    wv: cl(&b.wv),
                    wproj: cl(&b.wproj),
                    mlp1: cl(&b.mlp1),
                    mlp2: cl(&b.mlp2),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| ClassifierHead {
                    w: h.w.cast(),
                    b: h.b.cast(),
                })
                .collect(),
            exfusion: self.exfusion.as_ref().map(|set| ExFusionSet {
                lambda: U::from_f64(set.lambda.to_f64()),
                branches: set
                    .branches
                    .iter()
                    .map(|(s, psi)| (*s, psi.cast()))
                    .collect(),
            }),
        }
    }

    /// Rearrange a batch of flat images into stacked patch rows.
    fn patchify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.shape;
        if images.cols() != s.image_pixels() {
            return Err(Error::Model(format!(
                "expected {} pixels per image, got {}",
                s.image_pixels(),
                images.cols()
            )));
        }
        let batch = images.rows();
        let ps = s.patch_size;
        let side = s.patches_per_side();
        let mut out = Tensor::zeros(vec![batch * s.num_patches(), s.patch_pixels()]);
        for img in 0..batch {
            let pixels = images.row_slice(img);
            for py in 0..side {
                for px in 0..side {
                    let row = img * s.num_patches() + py * side + px;
                    let mut col = 0;
                    for c in 0..s.channels {
                        for dy in 0..ps {
                            for dx in 0..ps {
                                let y = py * ps + dy;
                                let x = px * ps + dx;
                                out.data_mut()[row * s.patch_pixels() + col] =
                                    pixels[c * s.image_size * s.image_size + y * s.image_size + x];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn linear_site(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        w: Var,
        b: Var,
        site: Site,
        vars: &ParamVars,
    ) -> Result<Var> {
        let branch = self
            .branch_for(site)
            .map(|(_, lambda)| (vars.branch(site).expect("branch recorded"), lambda));
        linear_with_branch(tape, x, w, b, branch)
    }

    /// Run the whole batch through the backbone and classifier on `tape`.
    /// `images` is [batch x pixels], one flat image per row.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<ForwardPass> {
        if self.heads.is_empty() {
            return Err(Error::Model("no classifier heads; expand before forward".into()));
        }
        let batch = images.rows();
        if batch == 0 {
            return Err(Error::Model("empty batch".into()));
        }
        let vars = self.record_params(tape)?;
        let features = self.features_from_vars(tape, images, &vars)?;
        let logits = self.classify_from_vars(tape, features, &vars)?;
        Ok(ForwardPass {
            features,
            logits,
            params: vars.named,
        })
    }

    /// Feature-only forward for prototype extraction and distillation.
    pub fn forward_features(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<(Var, Vec<(String, Var)>)> {
        let vars = self.record_params(tape)?;
        let features = self.features_from_vars(tape, images, &vars)?;
        Ok((features, vars.named))
    }

    /// Logits for an externally built feature batch (used when mixing real
    /// features with pseudo-features).
    pub fn classify(&self, tape: &mut Tape<T>, features: Var) -> Result<(Var, Vec<(String, Var)>)> {
        let vars = self.record_params(tape)?;
        let logits = self.classify_from_vars(tape, features, &vars)?;
        Ok((logits, vars.named))
    }

    fn record_params(&self, tape: &mut Tape<T>) -> Result<ParamVars> {
        let mut named = Vec::new();
        for (name, t) in self.named_params() {
            named.push((name, tape.leaf(t)?));
        }
        Ok(ParamVars { named })
    }

    fn features_from_vars(&self, tape: &mut Tape<T>, images: &Tensor<T>, vars: &ParamVars) -> Result<Var> {
        let s = &self.shape;
        let batch = images.rows();
        let n_tok = s.tokens();
        let n_patch = s.num_patches();

        let patches = self.patchify(images)?;
        let patches = tape.constant(&patches)?;
        let projected = tape.matmul(patches, vars.get("embed.proj.w"))?;
        let projected = tape.add_row(projected, vars.get("embed.proj.b"))?;

        // interleave one class-token row before each image's patch rows
        let cls_rows = tape.gather_rows(vars.get("embed.cls"), &vec![0; batch])?;
        let stacked = tape.concat_rows(&[cls_rows, projected])?;
        let mut order = Vec::with_capacity(batch * n_tok);
        for img in 0..batch {
            order.push(img);
            for p in 0..n_patch {
                order.push(batch + img * n_patch + p);
            }
        }
        let tokens = tape.gather_rows(stacked, &order)?;

        // tile positional embeddings across the batch
        let mut pos_order = Vec::with_capacity(batch * n_tok);
        for _ in 0..batch {
            pos_order.extend(0..n_tok);
        }
        let pos = tape.gather_rows(vars.get("embed.pos"), &pos_order)?;
        let mut x = tape.add(tokens, pos)?;

        for (i, _) in self.blocks.iter().enumerate() {
            x = self.block_forward(tape, x, i, n_tok, vars)?;
        }

        // class-token row of each image is the feature
        let cls_idx: Vec<usize> = (0..batch).map(|b| b * n_tok).collect();
        tape.gather_rows(x, &cls_idx)
    }

    fn block_forward(&self, tape: &mut Tape<T>, x: Var, i: usize, n_tok: usize, vars: &ParamVars) -> Result<Var> {
        let p = |suffix: &str| vars.get(&format!("block{i}.{suffix}"));

        let normed = tape.layer_norm(x, p("ln1.gamma"), p("ln1.beta"))?;
        let q = tape.matmul(normed, p("wq.w"))?;
        let q = tape.add_row(q, p("wq.b"))?;
        let k = tape.matmul(normed, p("wk.w"))?;
        let k = tape.add_row(k, p("wk.b"))?;
        let v = tape.matmul(normed, p("wv.w"))?;
        let v = tape.add_row(v, p("wv.b"))?;
        let attn = tape.attention(q, k, v, n_tok, self.shape.heads)?;
        let projected = self.linear_site(
            tape,
            attn,
            p("wproj.w"),
            p("wproj.b"),
            Site { block: i, kind: SiteKind::Proj },
            vars,
        )?;
        let x = tape.add(x, projected)?;

        let normed2 = tape.layer_norm(x, p("ln2.gamma"), p("ln2.beta"))?;
        let hidden = self.linear_site(
            tape,
            normed2,
            p("mlp1.w"),
            p("mlp1.b"),
            Site { block: i, kind: SiteKind::Mlp1 },
            vars,
        )?;
        let hidden = tape.gelu(hidden)?;
        let mlp_out = self.linear_site(
            tape,
            hidden,
            p("mlp2.w"),
            p("mlp2.b"),
            Site { block: i, kind: SiteKind::Mlp2 },
            vars,
        )?;
        tape.add(x, mlp_out)
    }

    fn classify_from_vars(&self, tape: &mut Tape<T>, features: Var, vars: &ParamVars) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.heads.len());
        for (i, _) in self.heads.iter().enumerate() {
            let logits = tape.matmul(features, vars.get(&format!("head{i}.w")))?;
            let logits = tape.add_row(logits, vars.get(&format!("head{i}.b")))?;
            parts.push(logits);
        }
        tape.concat_cols(&parts)
    }
}

struct ParamVars {
    named: Vec<(String, Var)>,
}

impl ParamVars {
    fn get(&self, name: &str) -> Var {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .expect("parameter name recorded during forward")
    }

    fn branch(&self, site: Site) -> Option<Var> {
        let name = format!("ex.{site}");
        self.named.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// One attachment site: host(x) = x W + b, plus an optional bias-free
/// branch scaled by lambda, so the output is x W + b + lambda*(x psi).
pub fn linear_with_branch<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    branch: Option<(Var, T)>,
) -> Result<Var> {
    let host = tape.matmul(x, w)?;
    let host = tape.add_row(host, b)?;
    match branch {
        None => Ok(host),
        Some((psi, lambda)) => {
            let side = tape.matmul(x, psi)?;
            tape.add_scaled(host, side, lambda)
        }
    }
}
