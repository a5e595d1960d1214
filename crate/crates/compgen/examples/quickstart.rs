//! Minimal tour of the library: generate a family, build a support, train a
//! small student, probe it, and compile/verify the teacher's explicit ReLU
//! approximation.

use compgen::construct::{build_hyperteacher_net, verify_with_seed};
use compgen::encodings::{Encoder, EncodingSpec, Variant};
use compgen::nn::{eval_compgen, train_student, MlpSpec, TrainConfig};
use compgen::probe::{decodability_score, ProbeConfig};
use compgen::rng::{stream, tag};
use compgen::support::{build_support, SupportSpec};
use compgen::taskfam::{init_hyperteacher, FamilyConfig};

fn main() -> compgen::Result<()> {
    let family = FamilyConfig {
        module_count: 6,
        max_active: 2,
        input_dim: 8,
        hidden_dim: 8,
        output_dim: 8,
        family_seed: 7,
        ..FamilyConfig::default()
    };
    let teacher = init_hyperteacher(&family)?;

    let support = build_support(
        &SupportSpec::default(),
        family.module_count,
        family.max_active,
        &mut stream(1, tag::SUPPORT, 0),
    )?;
    println!(
        "support: {} training masks, {} held out",
        support.graph.len(),
        support.heldout.len()
    );

    let encoder = Encoder::build(&EncodingSpec::new(Variant::Identity), &family)?;
    let spec = MlpSpec::rectangular(family.input_dim + encoder.dim(), 64, 3, family.output_dim);
    let train = TrainConfig {
        steps: 4_000,
        train_seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train_student(&teacher, &support.graph.vertices, &encoder, &spec, &train)?;
    println!("final train loss: {:.5}", outcome.final_loss);

    let r2 = eval_compgen(&outcome.model, &teacher, &support.heldout, &encoder, 64, 64, 1)?;
    println!("held-out R^2: {r2:.4}");

    let probe = decodability_score(
        &outcome.model,
        &teacher,
        &support.graph.vertices,
        &support.heldout,
        &encoder,
        &ProbeConfig {
            layer_index: 3,
            ..ProbeConfig::default()
        },
        1,
    )?;
    println!("probe held-out R^2 (layer 3): {:.4}", probe.heldout_r2);

    let net = build_hyperteacher_net(&teacher, 0.1)?;
    let report = verify_with_seed(&net, &teacher, 5_000, 1)?;
    println!(
        "compiled net: {} hidden neurons, sup error {:.4} (bound {:.4})",
        report.neuron_count, report.sup_error, report.analytic_bound
    );
    Ok(())
}
