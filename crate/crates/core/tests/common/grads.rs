//! Finite-difference checks for every differentiable operation.

use lesion_core::detection::{
    rcnn_loss, roi_pool, rpn_loss, AnchorAssignment, AnchorLabel, RcnnHead, RpnHead,
};
use lesion_core::geometry::{BBox, RegressionTarget};
use lesion_core::skinnet::{dice_loss, DenseBlock, DilatedBottleneck, SkinNet, SkinNetConfig};
use lesion_core::tensor::{
    grad_check_sampled, Conv2dSpec, Graph, LossKind, ParamId, ParamStore, Session, Tensor, Var,
};
use lesion_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Components checked per input tensor.
const PER_INPUT: usize = 24;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn check(build: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], seed: u64) -> f64 {
    grad_check_sampled(build, inputs, STEP, PER_INPUT, seed).expect("gradient check runs")
}

/// Checks a parameterized module: the input and every parameter become
/// perturbable leaves. Parameters are jittered off their initialization so
/// zero biases do not park ReLU inputs exactly on the kink.
fn check_module(
    store: &ParamStore,
    input: Tensor,
    seed: u64,
    f: impl Fn(&mut Session, Var) -> Result<Var>,
) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut r = rng(seed ^ 0x5eed);
    let mut inputs = vec![input];
    inputs.extend(ids.iter().map(|&id| {
        let mut p = store.get(id).clone();
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v += r.gen_range(-0.1..0.1));
        p
    }));
    let build = |g: &mut Graph, v: &[Var]| {
        let mut s = Session::from_graph(std::mem::take(g), store);
        for (i, &id) in ids.iter().enumerate() {
            s.bind(id, v[i + 1]);
        }
        let out = f(&mut s, v[0]);
        *g = s.into_graph();
        out
    };
    check(build, &inputs, seed)
}

fn onehot(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let c = rng.gen_range(0..k);
        t.data_mut()[i * k + c] = 1.0;
    }
    t
}

type Case = (&'static str, fn(u64) -> f64);

pub const CASES: &[Case] = &[
    ("conv2d", conv_plain),
    ("conv2d_stride2", conv_stride),
    ("conv2d_dilated", conv_dilated),
    ("maxpool", maxpool),
    ("bilinear_up", resize_up),
    ("bilinear_down", resize_down),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("concat_add_scale", concat_add_scale),
    ("gather_reshape", gather_reshape),
    ("linear", linear),
    ("loss_bce", bce),
    ("loss_cce", cce),
    ("loss_mse", mse),
    ("loss_dice", dice),
    ("roi_pool", roi),
    ("dense_block", dense_block),
    ("dilated_bottleneck", bottleneck),
    ("rpn_head", rpn_head),
    ("rcnn_head", rcnn_head),
    ("skinnet_toy", skinnet_toy),
];

/// Worst relative error per case over `seeds`.
pub fn battery(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    CASES
        .iter()
        .map(|&(name, f)| (name, seeds.clone().map(f).fold(0.0, f64::max)))
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv_case(seed: u64, spec: Conv2dSpec, k: usize) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[6, 7, 2], &mut r, -1.0, 1.0);
    let w = rand_tensor(&[k, k, 2, 3], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[3], &mut r, -1.0, 1.0);
    check(|g, v| g.conv2d(v[0], v[1], v[2], spec), &[x, w, b], seed)
}

fn conv_plain(seed: u64) -> f64 {
    conv_case(seed, Conv2dSpec::same(1), 3)
}

fn conv_stride(seed: u64) -> f64 {
    conv_case(
        seed,
        Conv2dSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
        },
        3,
    )
}

fn conv_dilated(seed: u64) -> f64 {
    conv_case(seed, Conv2dSpec::same(2), 3)
}

fn maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[6, 6, 2], &mut r, -1.0, 1.0);
    check(|g, v| g.maxpool2d(v[0], 2, 2), &[x], seed)
}

fn resize_up(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[3, 4, 2], &mut r, -1.0, 1.0);
    check(|g, v| g.bilinear_resize(v[0], 7, 5), &[x], seed)
}

fn resize_down(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[8, 7, 2], &mut r, -1.0, 1.0);
    check(|g, v| g.bilinear_resize(v[0], 3, 4), &[x], seed)
}

fn relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[5, 4], &mut r, -1.0, 1.0);
    check(|g, v| g.relu(v[0]), &[x], seed)
}

fn sigmoid(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[5, 4], &mut r, -3.0, 3.0);
    check(|g, v| g.sigmoid(v[0]), &[x], seed)
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[3, 4, 3], &mut r, -3.0, 3.0);
    check(|g, v| g.softmax(v[0]), &[x], seed)
}

fn concat_add_scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = rand_tensor(&[3, 3, 2], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[3, 3, 1], &mut r, -1.0, 1.0);
    let c = rand_tensor(&[3, 3, 3], &mut r, -1.0, 1.0);
    check(
        |g, v| {
            let cat = g.concat(&[v[0], v[1]])?;
            let sum = g.add(cat, v[2])?;
            g.scale(sum, -1.7)
        },
        &[a, b, c],
        seed,
    )
}

fn gather_reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[4, 3, 2], &mut r, -1.0, 1.0);
    check(
        |g, v| {
            let picked = g.gather(v[0], vec![0, 5, 5, 23, 7, 11], &[3, 2])?;
            g.reshape(picked, &[6])
        },
        &[x],
        seed,
    )
}

fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[3, 5], &mut r, -1.0, 1.0);
    let w = rand_tensor(&[5, 4], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[4], &mut r, -1.0, 1.0);
    check(|g, v| g.linear(v[0], v[1], v[2]), &[x, w, b], seed)
}

fn bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[8], &mut r, 0.05, 0.95);
    let t = Tensor::from_fn(&[8], |_| f64::from(r.gen_bool(0.5)));
    check(
        move |g, v| g.loss(v[0], t.clone(), LossKind::BinaryCrossEntropy),
        &[x],
        seed,
    )
}

fn cce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[5, 3], &mut r, -2.0, 2.0);
    let t = onehot(5, 3, &mut r);
    check(
        move |g, v| {
            let p = g.softmax(v[0])?;
            g.loss(p, t.clone(), LossKind::CategoricalCrossEntropy)
        },
        &[x],
        seed,
    )
}

fn mse(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[4, 4], &mut r, -2.0, 2.0);
    let t = rand_tensor(&[4, 4], &mut r, -2.0, 2.0);
    check(
        move |g, v| g.loss(v[0], t.clone(), LossKind::Mse),
        &[x],
        seed,
    )
}

fn dice(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[4, 5, 2], &mut r, -2.0, 2.0);
    let t = onehot(20, 2, &mut r).reshape(&[4, 5, 2]).unwrap();
    check(
        move |g, v| {
            let p = g.softmax(v[0])?;
            dice_loss(g, p, &t)
        },
        &[x],
        seed,
    )
}

fn roi(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&[8, 8, 2], &mut r, -1.0, 1.0);
    let x1 = r.gen_range(0.0..12.0);
    let y1 = r.gen_range(0.0..12.0);
    let bbox = BBox::new(
        x1,
        y1,
        r.gen_range(x1 + 4.0..32.0),
        r.gen_range(y1 + 4.0..32.0),
    )
    .unwrap();
    check(move |g, v| roi_pool(g, v[0], &bbox, 4), &[x], seed)
}

fn dense_block(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let block = DenseBlock::new(&mut store, "d", 2, 2, 2, &mut r);
    let x = rand_tensor(&[5, 5, 2], &mut r, -1.0, 1.0);
    check_module(&store, x, seed, |s, v| block.forward(s, v))
}

fn bottleneck(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let b = DilatedBottleneck::new(&mut store, "b", 2, 3, &[1, 2, 4], &mut r);
    let x = rand_tensor(&[6, 6, 2], &mut r, -1.0, 1.0);
    check_module(&store, x, seed, |s, v| b.forward(s, v))
}

fn rpn_head(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let head = RpnHead::new(3, 4, 2, &mut store, &mut r);
    let x = rand_tensor(&[6, 6, 3], &mut r, -1.0, 1.0);
    let n = 4 * 2;
    let labels: Vec<AnchorLabel> = (0..n)
        .map(|i| {
            if i % 3 == 0 {
                AnchorLabel::Positive { gt: 0 }
            } else {
                AnchorLabel::Negative
            }
        })
        .collect();
    let targets = labels
        .iter()
        .map(|l| {
            matches!(l, AnchorLabel::Positive { .. }).then(|| RegressionTarget {
                tx: r.gen_range(-0.5..0.5),
                ty: r.gen_range(-0.5..0.5),
                tw: r.gen_range(-0.5..0.5),
                th: r.gen_range(-0.5..0.5),
            })
        })
        .collect();
    let assignment = AnchorAssignment {
        labels,
        targets,
        promoted: Vec::new(),
    };
    check_module(&store, x, seed, move |s, v| {
        let out = head.forward(s, v)?;
        let mut sampler = ChaCha8Rng::seed_from_u64(0);
        Ok(rpn_loss(&mut s.graph, &out, &assignment, 128, &mut sampler)?.total)
    })
}

fn rcnn_head(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let head = RcnnHead::new(2, 3, 4, &mut store, &mut r);
    let x = rand_tensor(&[8, 8, 2], &mut r, -1.0, 1.0);
    let boxes = [
        BBox::new(0.0, 0.0, 20.0, 24.0).unwrap(),
        BBox::new(6.0, 4.0, 30.0, 31.0).unwrap(),
    ];
    let targets = [
        Some(RegressionTarget {
            tx: 0.1,
            ty: -0.2,
            tw: 0.05,
            th: 0.3,
        }),
        None,
    ];
    check_module(&store, x, seed, move |s, v| {
        let out = head.forward_boxes(s, v, &boxes, 4)?;
        Ok(rcnn_loss(&mut s.graph, &out, &targets)?.total)
    })
}

fn skinnet_toy(seed: u64) -> f64 {
    let config = SkinNetConfig {
        input_size: 8,
        blocks: 1,
        layers: 1,
        growth: 2,
        dilation_rates: vec![1, 2],
        stem_channels: 2,
        bottleneck_channels: 2,
        decoder_channels: 2,
    };
    let net = SkinNet::new(config, seed).unwrap();
    let mut r = rng(seed);
    let x = rand_tensor(&[8, 8, 3], &mut r, 0.0, 1.0);
    let t = onehot(64, 2, &mut r).reshape(&[8, 8, 2]).unwrap();
    check_module(&net.params, x, seed, |s, v| {
        let p = net.forward(s, v)?;
        dice_loss(&mut s.graph, p, &t)
    })
}
