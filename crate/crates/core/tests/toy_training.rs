use untangle_core::embedding::{build_corpus, EmbeddedCorpus};
use untangle_core::eval::{EvalSetup, DEFAULT_STRENGTHS};
use untangle_core::mapper::{train_mapper, LossWeights, MapperModel, Objective, TrainConfig, TrainingTrace};
use untangle_core::predict::{predict_entangled, PredictorConfig};
use untangle_core::toy::{ToyStack, ToyStackSpec};

struct Run {
    stack: ToyStack,
    corpus: EmbeddedCorpus,
    entangled: Vec<String>,
}

fn setup() -> Run {
    let stack = ToyStack::build(&ToyStackSpec::default()).unwrap();
    let items = stack.latents.render(&stack.generator).unwrap();
    let corpus = build_corpus(&stack.backend, &items, None).unwrap();
    let p = predict_entangled(
        &stack.spec.command,
        &corpus,
        &stack.hierarchy,
        &stack.backend,
        None,
        &PredictorConfig::default(),
        None,
    )
    .unwrap();
    Run {
        entangled: p.entangled_texts(),
        stack,
        corpus,
    }
}

impl Run {
    fn train(&self, lambda_e: f64, steps: usize) -> (MapperModel, TrainingTrace) {
        let weights = LossWeights {
            lambda_e,
            ..Default::default()
        };
        let obj = Objective::new(
            &self.stack.generator,
            &self.stack.backend,
            Some(&self.stack.identity),
            &self.stack.spec.command,
            &self.entangled,
            weights,
        )
        .unwrap();
        let cfg = TrainConfig {
            steps,
            seed: 1,
            ..Default::default()
        };
        train_mapper(&obj, &self.stack.latents, &cfg).unwrap()
    }

    fn eval(&self) -> EvalSetup<'_> {
        EvalSetup {
            generator: &self.stack.generator,
            backend: &self.stack.backend,
            corpus: &self.corpus,
            command: &self.stack.spec.command,
            entangled: &self.entangled,
            ranges: None,
        }
    }
}

#[test]
fn partners_lead_the_prediction() {
    let run = setup();
    let mut top: Vec<&str> = run.entangled[..3].iter().map(String::as_str).collect();
    top.sort();
    assert_eq!(top, ["grey eyes", "white skin", "with wrinkles"]);
}

#[test]
fn entanglement_weight_orders_side_effects() {
    let run = setup();
    let test = run.stack.latents.head(200);
    let side: Vec<f64> = [0.0, 10.0, 100.0]
        .iter()
        .map(|&l| {
            let (m, _) = run.train(l, 500);
            let r = run.eval().evaluate(&test, &m, 1.0).unwrap();
            assert!(r.delta_command > 0.0);
            r.mean_abs_entangled
        })
        .collect();
    assert!(side[0] > side[1] && side[1] > side[2], "{side:?}");
}

#[test]
fn proposed_beats_baseline_across_strengths() {
    let run = setup();
    let test = run.stack.latents.head(200);
    let (base, _) = run.train(0.0, 500);
    let (ppe, _) = run.train(100.0, 500);
    let eval = run.eval();
    let b = eval.evaluate(&test, &base, 1.0).unwrap();
    let p = eval.evaluate(&test, &ppe, 1.0).unwrap();
    assert!(p.indicator.unwrap() < b.indicator.unwrap());

    let bs = eval.sweep(&test, &base, &DEFAULT_STRENGTHS).unwrap();
    let ps = eval.sweep(&test, &ppe, &DEFAULT_STRENGTHS).unwrap();
    assert_eq!(bs[0].delta_command, 0.0);
    assert_eq!(ps[0].mean_abs_entangled, 0.0);
    for sweep in [&bs, &ps] {
        for w in sweep.windows(2) {
            assert!(w[1].delta_command > w[0].delta_command);
        }
    }
    for (x, y) in bs.iter().zip(&ps).skip(1) {
        assert!(y.mean_abs_entangled < x.mean_abs_entangled, "s={}", x.strength);
    }
}

#[test]
fn training_is_deterministic() {
    let run = setup();
    let (m1, t1) = run.train(100.0, 60);
    let (m2, t2) = run.train(100.0, 60);
    assert_eq!(m1.to_blob(), m2.to_blob());
    assert_eq!(t1.entries, t2.entries);
    assert_eq!(t1.entries.len(), 60);
}
