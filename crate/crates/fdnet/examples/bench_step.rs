// Rough timing breakdown of one training iteration at desk scale.
use fdnet::loss::{LossConfig, WeightScheme};
use fdnet::model::{init_params, rollout, ModelConfig};
use fdnet::tensor::{Graph, Tensor};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig {
        input_height: 32,
        input_width: 32,
        ..ModelConfig::default()
    };
    let params = init_params::<f32>(&cfg, 1).unwrap();
    println!("params: {}", params.num_parameters());
    let inputs = Tensor::<f32>::from_fn(&[4, 4, 1, 32, 32], |i| ((i * 37) % 100) as f32 / 100.0);
    let targets = Tensor::<f32>::from_fn(&[6, 4, 1, 32, 32], |i| ((i * 53) % 100) as f32 / 100.0);
    let scheme = WeightScheme::normalized_default();
    let lc = LossConfig::default();

    // Forward only
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let g = Graph::new();
        let model = params.bind(&g);
        let out = rollout(&model, &g, &inputs, 6, None, None, false).unwrap();
        std::hint::black_box(g.value(out.forecast[5]));
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward rollout: {:.3} s", fwd);

    // Forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let g = Graph::new();
        let model = params.bind(&g);
        let out = rollout(&model, &g, &inputs, 6, None, None, false).unwrap();
        let mut acc = None;
        let per = 4 * 32 * 32;
        for (k, v) in out.forecast.iter().enumerate() {
            let tgt = Tensor::from_vec(&[4, 1, 32, 32], targets.data()[k * per..(k + 1) * per].to_vec()).unwrap();
            let lv = fdnet::loss::total_loss(&g, *v, &tgt, &scheme, &lc).unwrap();
            acc = Some(match acc { None => lv.total, Some(a) => g.add(a, lv.total).unwrap() });
        }
        let grads = g.backward(acc.unwrap()).unwrap();
        std::hint::black_box(grads.get_or_zeros(model.names[0].1));
    }
    let full = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward+backward:  {:.3} s (backward ~{:.3} s)", full, full - fwd);

    // Raw gemm throughput at the hot shape (h-conv): m=128, k=1152, n=64.
    let m = 128; let k = 1152; let n = 64;
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    let reps2 = 2000;
    for _ in 0..reps2 {
        unsafe {
            matrixmultiply_shim(m, k, n, &a, &b, &mut c);
        }
    }
    let per = t0.elapsed().as_secs_f64() / reps2 as f64;
    println!(
        "gemm {}x{}x{}: {:.1} us -> {:.1} GFLOP/s",
        m, k, n,
        per * 1e6,
        2.0 * (m * k * n) as f64 / per / 1e9
    );
}

unsafe fn matrixmultiply_shim(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    use fdnet::tensor::Element;
    f32::gemm(m, k, n, 1.0, a, b, 0.0, c);
}
