use ndarray::Array2;
use std::time::Instant;

fn main() {
    for &n in &[256usize, 512] {
        let a = Array2::<f32>::from_elem((n, n), 1.001);
        let b = Array2::<f32>::from_elem((n, n), 0.999);
        let t = Instant::now();
        let reps = if n == 256 { 40 } else { 10 };
        let mut acc = 0.0f32;
        for _ in 0..reps {
            let c = a.dot(&b);
            acc += c[[0, 0]];
        }
        let dt = t.elapsed().as_secs_f64();
        let gflops = (2.0 * (n * n * n) as f64 * reps as f64) / dt / 1e9;
        println!("f32 n={n}: {gflops:.2} GFLOPS (acc={acc})");
        let a = Array2::<f64>::from_elem((n, n), 1.001);
        let b = Array2::<f64>::from_elem((n, n), 0.999);
        let t = Instant::now();
        let mut acc = 0.0f64;
        for _ in 0..reps {
            let c = a.dot(&b);
            acc += c[[0, 0]];
        }
        let dt = t.elapsed().as_secs_f64();
        let gflops = (2.0 * (n * n * n) as f64 * reps as f64) / dt / 1e9;
        println!("f64 n={n}: {gflops:.2} GFLOPS (acc={acc})");
    }
}
