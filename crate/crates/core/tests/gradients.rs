use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use untangle_core::mapper::{LossTerms, LossWeights, MapperModel, Objective};
use untangle_core::toy::{ToyStack, ToyStackSpec};

const H: f64 = 1e-3;

type TermCheck = (&'static str, LossWeights, fn(&LossTerms) -> f64);

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn numeric(obj: &Objective, mapper: &MapperModel, batch: &[&[f64]], term: fn(&LossTerms) -> f64) -> Vec<f64> {
    let mut m = mapper.clone();
    (0..mapper.params().len())
        .map(|i| {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + H;
            let up = term(&obj.loss(&m, batch).unwrap());
            m.params_mut()[i] = orig - H;
            let down = term(&obj.loss(&m, batch).unwrap());
            m.params_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

struct Fixture {
    stack: ToyStack,
    entangled: Vec<String>,
    batch: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let stack = ToyStack::build(&ToyStackSpec {
        items: 64,
        ..Default::default()
    })
    .unwrap();
    let batch = stack.latents.latents[..8].iter().map(|l| l.values().to_vec()).collect();
    Fixture {
        entangled: stack.spec.partners.clone(),
        stack,
        batch,
    }
}

fn objective<'a>(f: &'a Fixture, weights: LossWeights) -> Objective<'a> {
    Objective::new(
        &f.stack.generator,
        &f.stack.backend,
        Some(&f.stack.identity),
        &f.stack.spec.command,
        &f.entangled,
        weights,
    )
    .unwrap()
}

/// Checks every term's analytic gradient at one parameter point. Single-term
/// gradients are isolated by subtracting the clip-only gradient.
fn check_point(f: &Fixture, mapper: &MapperModel) {
    let batch: Vec<&[f64]> = f.batch.iter().map(Vec::as_slice).collect();
    let none = LossWeights {
        lambda_l2: 0.0,
        lambda_id: 0.0,
        lambda_e: 0.0,
    };
    let clip_obj = objective(f, none);
    let (_, g_clip) = clip_obj.loss_and_grad(mapper, &batch).unwrap();
    let n_clip = numeric(&clip_obj, mapper, &batch, |t| t.clip);
    assert!(rel_err(&g_clip, &n_clip) < 1e-3, "clip {}", rel_err(&g_clip, &n_clip));

    let singles: [TermCheck; 3] = [
        ("l2", LossWeights { lambda_l2: 1.0, ..none }, |t| t.l2),
        ("id", LossWeights { lambda_id: 1.0, ..none }, |t| t.id),
        ("entanglement", LossWeights { lambda_e: 1.0, ..none }, |t| t.entanglement),
    ];
    for (name, w, term) in singles {
        let obj = objective(f, w);
        let (_, g) = obj.loss_and_grad(mapper, &batch).unwrap();
        let g: Vec<f64> = g.iter().zip(&g_clip).map(|(a, b)| a - b).collect();
        let n = numeric(&obj, mapper, &batch, term);
        let e = rel_err(&g, &n);
        assert!(e < 1e-3, "{name}: relative error {e}");
    }

    let obj = objective(f, LossWeights::default());
    let (_, g) = obj.loss_and_grad(mapper, &batch).unwrap();
    let n = numeric(&obj, mapper, &batch, |t| t.total);
    assert!(rel_err(&g, &n) < 1e-3, "total {}", rel_err(&g, &n));
}

#[test]
fn basis_mapper_gradients_match_finite_differences() {
    let f = fixture();
    let dirs = vec![
        f.stack.directions[&f.stack.spec.command].clone(),
        f.stack.directions[&f.stack.spec.partners[0]].clone(),
    ];
    let mut mapper = MapperModel::basis(f.stack.spec.latent_dim, dirs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        for p in mapper.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        check_point(&f, &mapper);
    }
}

#[test]
fn mlp_mapper_gradients_match_finite_differences() {
    let f = fixture();
    for seed in 0..3 {
        let mut mapper = MapperModel::mlp(f.stack.spec.latent_dim, &[8], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in mapper.params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        check_point(&f, &mapper);
    }
}
