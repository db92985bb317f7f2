//! Prints the default causal graph, its factorization, and the validator's
//! verdict on the default graph and on two broken variants.

use aqa_causal::causal_graph::{
    default_graph, factorization_string, validate, CausalEdge, CausalGraph, VariableId,
};

fn report(name: &str, g: &CausalGraph) {
    let v = validate(g);
    println!("{name}: {}", factorization_string(g));
    if v.is_empty() {
        println!("  valid");
    }
    for msg in v {
        println!("  violation: {msg}");
    }
}

fn main() -> aqa_causal::Result<()> {
    let g = default_graph();
    println!("{}", g.to_json()?);
    report("default", &g);

    let mut cyclic = default_graph();
    cyclic
        .edges
        .push(CausalEdge::genuine(VariableId::YQuery, VariableId::OQuery));
    report("with Y -> O", &cyclic);

    let backwards = CausalGraph::with_nodes(
        &[VariableId::SQuery, VariableId::FQuery],
        vec![CausalEdge::genuine(VariableId::SQuery, VariableId::FQuery)],
    );
    report("S -> F only", &backwards);
    Ok(())
}
