use anyhow::Result;
use fan_tensor::gradcheck::{registered_ops, run_suite, GradCase, GradOp};
use fan_tensor::tape::CustomArgs;
use fan_tensor::Tensor;

use crate::{GradcheckArgs, NumericalFailure};

/// `x * x` whose backward rule drops the factor of two.
fn faulty_square() -> GradOp {
    GradOp::new("faulty_square", |rng| GradCase {
        inputs: vec![Tensor::uniform(vec![3, 4], -1.0, 1.0, rng).with_grad()],
        build: Box::new(|t, v| {
            let y: Vec<f64> = t.value(v[0]).iter().map(|x| x * x).collect();
            let shape = t.shape(v[0]).to_vec();
            t.custom(
                "faulty_square",
                &[v[0]],
                shape,
                y,
                Box::new(|a: &CustomArgs<'_, f64>| vec![a.inputs[0].iter().zip(a.upstream).map(|(x, g)| x * g).collect()]),
            )
        }),
    })
}

pub fn run(a: &GradcheckArgs, seed: u64) -> Result<()> {
    if a.cases == 0 {
        return Err(fan_core::CoreError::Config("--cases must be at least 1".into()).into());
    }
    let mut ops = registered_ops();
    if a.inject_fault {
        ops.push(faulty_square());
    }
    let reports = run_suite(&ops, a.cases, seed);
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        println!(
            "{:<width$}  {} cases  max rel error {:.3e}  {}",
            r.name,
            r.cases,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if let Some(e) = &r.error {
            println!("  {e}");
        }
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} ops passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(NumericalFailure(format!("{failed} op(s) failed the gradient check")).into());
    }
    Ok(())
}
