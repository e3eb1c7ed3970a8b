//! Print the block-causal attention mask of a short prompt.

use vicon::model::{build_block_causal_mask, token_position, TokenRole};

fn main() {
    let (pairs, nc, nq) = (3, 2, 2);
    let mask = build_block_causal_mask(pairs, nc, nq);
    println!("{pairs} pairs, {nc} condition and {nq} QoI tokens each (# = may attend)\n");
    let label = |t: usize| {
        let (pair, role, patch) = token_position(t, nc, nq);
        let r = match role {
            TokenRole::Condition => 'c',
            TokenRole::Qoi => 'q',
        };
        format!("{r}{}.{patch}", pair + 1)
    };
    print!("      ");
    for c in 0..mask.size() {
        print!("{:>5}", label(c));
    }
    println!();
    for r in 0..mask.size() {
        print!("{:>5} ", label(r));
        for c in 0..mask.size() {
            print!("{:>5}", if mask.allowed(r, c) { "#" } else { "." });
        }
        println!();
    }
}
