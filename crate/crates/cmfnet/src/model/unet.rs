//! Branch U-Net: attention blocks at every scale, 2×2 average-pool
//! downsampling with a channel-doubling 3×3 conv, bilinear upsampling with a
//! channel-halving 3×3 conv, and additive encoder→decoder skips.

use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block_forward, AttentionBlockParams, AttentionKind};
use crate::error::{Error, Result};
use crate::nn::{key, Conv2dParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct UnetParams<E: Element> {
    /// Blocks per encoder scale; the last scale is the bottleneck.
    pub enc: Vec<Vec<AttentionBlockParams<E>>>,
    /// Channel-doubling convs applied after each downsample.
    pub down: Vec<Conv2dParams<E>>,
    /// Channel-halving convs applied after each bilinear upsample.
    pub up: Vec<Conv2dParams<E>>,
    /// Blocks per decoder scale, from coarse to fine.
    pub dec: Vec<Vec<AttentionBlockParams<E>>>,
}

impl<E: Element> UnetParams<E> {
    #[allow(clippy::too_many_arguments)]
    fn build(
        mut make_block: impl FnMut(usize) -> Result<AttentionBlockParams<E>>,
        mut make_conv: impl FnMut(usize, usize) -> Conv2dParams<E>,
        width: usize,
        scales: usize,
        blocks_per_scale: usize,
    ) -> Result<Self> {
        let ch = |s: usize| width << s;
        let mut enc = Vec::with_capacity(scales);
        let mut down = Vec::new();
        for s in 0..scales {
            enc.push((0..blocks_per_scale).map(|_| make_block(ch(s))).collect::<Result<_>>()?);
            if s + 1 < scales {
                down.push(make_conv(ch(s + 1), ch(s)));
            }
        }
        let mut up = Vec::new();
        let mut dec = Vec::with_capacity(scales - 1);
        for d in 0..scales - 1 {
            let coarse = ch(scales - 1 - d);
            up.push(make_conv(coarse / 2, coarse));
            dec.push((0..blocks_per_scale).map(|_| make_block(coarse / 2)).collect::<Result<_>>()?);
        }
        Ok(UnetParams { enc, down, up, dec })
    }

    pub fn init(
        rng: &mut ChaCha8Rng,
        kind: AttentionKind,
        width: usize,
        scales: usize,
        blocks_per_scale: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        // Two closures cannot both borrow rng; thread it through a RefCell.
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            |c| AttentionBlockParams::init(&mut rng.borrow_mut(), kind, c, reduction, spatial_kernel),
            |cout, cin| Conv2dParams::init(&mut rng.borrow_mut(), cout, cin, 3),
            width,
            scales,
            blocks_per_scale,
        )
    }

    pub fn zeros(
        kind: AttentionKind,
        width: usize,
        scales: usize,
        blocks_per_scale: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        Self::build(
            |c| AttentionBlockParams::zeros(kind, c, reduction, spatial_kernel),
            |cout, cin| Conv2dParams::zeros(cout, cin, 3),
            width,
            scales,
            blocks_per_scale,
        )
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (s, blocks) in self.enc.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.visit(&key(prefix, &format!("enc{s}.block{j}")), f);
            }
        }
        for (s, c) in self.down.iter().enumerate() {
            c.visit(&key(prefix, &format!("down{s}")), f);
        }
        for (d, c) in self.up.iter().enumerate() {
            c.visit(&key(prefix, &format!("up{d}")), f);
        }
        for (d, blocks) in self.dec.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.visit(&key(prefix, &format!("dec{d}.block{j}")), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (s, blocks) in self.enc.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&key(prefix, &format!("enc{s}.block{j}")), f);
            }
        }
        for (s, c) in self.down.iter_mut().enumerate() {
            c.visit_mut(&key(prefix, &format!("down{s}")), f);
        }
        for (d, c) in self.up.iter_mut().enumerate() {
            c.visit_mut(&key(prefix, &format!("up{d}")), f);
        }
        for (d, blocks) in self.dec.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&key(prefix, &format!("dec{d}.block{j}")), f);
            }
        }
    }

    pub fn map<F: Element>(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<F>) -> UnetParams<F> {
        UnetParams {
            enc: self.enc.iter().map(|bs| bs.iter().map(|b| b.map(f)).collect()).collect(),
            down: self.down.iter().map(|c| c.map(f)).collect(),
            up: self.up.iter().map(|c| c.map(f)).collect(),
            dec: self.dec.iter().map(|bs| bs.iter().map(|b| b.map(f)).collect()).collect(),
        }
    }
}

/// Run one branch U-Net over width-channel shallow features, returning a
/// width-channel map at the input resolution. H and W must be divisible by
/// 2^(scales−1).
pub fn branch_unet_forward<E: Element>(shallow: &Tensor<E>, p: &UnetParams<E>) -> Result<Tensor<E>> {
    let scales = p.enc.len();
    let factor = 1usize << (scales - 1);
    let (_, _, h, w) = shallow.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "branch_unet",
            format!("spatial size {h}x{w} not divisible by {factor}"),
        ));
    }
    let mut skips: Vec<Tensor<E>> = Vec::with_capacity(scales - 1);
    let mut cur = shallow.clone();
    for (s, blocks) in p.enc.iter().enumerate() {
        for block in blocks {
            cur = attention_block_forward(&cur, block)?;
        }
        if s + 1 < scales {
            skips.push(cur.clone());
            cur = p.down[s].apply(&cur.avg_pool2()?)?;
        }
    }
    for (d, blocks) in p.dec.iter().enumerate() {
        cur = p.up[d].apply(&cur.upsample_bilinear2x()?)?;
        cur = cur.add(&skips.pop().expect("one skip per decoder scale"))?;
        for block in blocks {
            cur = attention_block_forward(&cur, block)?;
        }
    }
    Ok(cur)
}
