mod common;

use common::{dataset, gradient_audit, small_model, Term};
use triprec::Model;

fn audit(term: Term) {
    let ds = dataset(20);
    let model = Model::new(&small_model(), &ds, 5).unwrap();
    let records = ds.train.iter().take(2).collect();
    let report = gradient_audit(&model, records, term, 2);
    eprintln!(
        "{term:?}: {} entries, worst relative error {:e}",
        report.checked, report.worst_rel
    );
    assert!(report.checked > 100, "only {} entries probed", report.checked);
    assert!(
        report.failures.is_empty(),
        "{term:?}: {} of {} entries disagree (worst rel {:e}):\n{}",
        report.failures.len(),
        report.checked,
        report.worst_rel,
        report.failures.join("\n")
    );
}

#[test]
fn static_alignment_gradients() {
    audit(Term::Static);
}

#[test]
fn dynamic_elbo_gradients_through_the_solver() {
    audit(Term::Dynamic);
}

#[test]
fn recommendation_gradients() {
    audit(Term::Rec);
}

#[test]
fn total_loss_gradients() {
    audit(Term::Total);
}
