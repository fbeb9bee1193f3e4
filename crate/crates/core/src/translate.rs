//! Emission of Venture source text for synthesized programs.
//!
//! The output is for reading and interop only; predictions are computed by the
//! native interpreters in [`crate::gp`] and [`crate::mixture`].

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::gp::{Kernel, KernelError};
use crate::mixture::{Dist, MixtureProgram};
use crate::sexpr::{format_num, Expr};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VentureText {
    pub text: String,
    /// Hex digest of the source program's canonical text.
    pub source_hash: String,
}

fn source_hash(e: &Expr) -> String {
    let digest = Sha256::digest(e.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn sigmoid(x: &str, v: &str) -> String {
    format!("sigmoid({x}, {v}, .1)")
}

/// Covariance function text for a kernel, on one line.
pub fn venture_cov(k: &Kernel) -> String {
    let n = format_num;
    match k {
        Kernel::Const(v) => format!("((x1, x2) -> {{{}}})", n(*v)),
        Kernel::WhiteNoise(v) => format!("((x1, x2) -> {{if (x1==x2) {{{}}} else {{0}}}})", n(*v)),
        Kernel::Linear(v) => {
            let v = n(*v);
            format!("((x1, x2) -> {{(x1-{v}) * (x2-{v})}})")
        }
        Kernel::SquaredExp(v) => format!("((x1, x2) -> {{exp(-(x1-x2)**2/{})}})", n(*v)),
        Kernel::Periodic { length, period } => format!(
            "((x1, x2) -> {{exp(-2/{} * sin(2*pi/{} * abs(x1-x2))**2)}})",
            n(*length),
            n(*period)
        ),
        Kernel::Sum(a, b) => format!(
            "((x1, x2) -> {{{}(x1, x2) + {}(x1, x2)}})",
            venture_cov(a),
            venture_cov(b)
        ),
        Kernel::Product(a, b) => format!(
            "((x1, x2) -> {{{}(x1, x2) * {}(x1, x2)}})",
            venture_cov(a),
            venture_cov(b)
        ),
        Kernel::ChangePoint { location, left, right } => {
            let v = n(*location);
            format!(
                "((x1, x2) -> {{sig1 = (1-{}) * (1-{}); sig2 = {} * {}; sig1 * {}(x1, x2) + sig2 * {}(x1, x2)}})",
                sigmoid("x1", &v),
                sigmoid("x2", &v),
                sigmoid("x1", &v),
                sigmoid("x2", &v),
                venture_cov(left),
                venture_cov(right)
            )
        }
    }
}

/// `assume gp = gaussian_process(...)` for a kernel program.
pub fn gp_to_venture(e: &Expr) -> Result<VentureText, KernelError> {
    let k = Kernel::from_expr(e)?;
    Ok(VentureText {
        text: format!("assume gp = gaussian_process(gp_mean_constant(0),\n  {});\n", venture_cov(&k)),
        source_hash: source_hash(e),
    })
}

fn venture_dist(d: &Dist) -> String {
    match d {
        Dist::Normal { mean, sd } => format!("normal({}, {})", format_num(*mean), format_num(*sd)),
        Dist::Poisson { rate } => format!("poisson({})", format_num(*rate)),
        // Venture categories are 0-based; table categories start at 1.
        Dist::Categorical(w) => format!("1 + categorical(simplex([{}]))", join(w)),
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format_num(*x)).collect::<Vec<_>>().join(", ")
}

/// One categorical cluster assignment per block, then one `cond` per variable.
pub fn mixture_to_venture(p: &MixtureProgram) -> VentureText {
    let mut out = String::new();
    for (b, block) in p.blocks.iter().enumerate() {
        let b = b + 1;
        let total = block.total_weight() as f64;
        let weights: Vec<f64> = block.clusters.iter().map(|c| c.weight as f64 / total).collect();
        if b > 1 {
            out.push('\n');
        }
        let _ = writeln!(out, "assume block{b}_cluster =\n  categorical(simplex([{}])) #block:{b};", join(&weights));
        for (i, &col) in block.columns.iter().enumerate() {
            let _ = write!(out, "\nassume var{} = cond(", col + 1);
            for (z, cluster) in block.clusters.iter().enumerate() {
                let _ = write!(out, "\n  (block{b}_cluster == {z}) ({})", venture_dist(&cluster.dists[i]));
            }
            out.push_str(");\n");
        }
    }
    VentureText {
        text: out,
        source_hash: source_hash(&p.to_expr()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::TableSchema;
    use crate::sexpr::parse;

    fn cov(s: &str) -> String {
        venture_cov(&Kernel::from_expr(&parse(s).unwrap()).unwrap())
    }

    #[test]
    fn base_kernel_forms() {
        assert_eq!(cov("(const (gamma 2.5))"), "((x1, x2) -> {2.5})");
        assert_eq!(cov("(wn (gamma 49.5))"), "((x1, x2) -> {if (x1==x2) {49.5} else {0}})");
        assert_eq!(cov("(lin (gamma 1.2))"), "((x1, x2) -> {(x1-1.2) * (x2-1.2)})");
        assert_eq!(cov("(se (gamma 3))"), "((x1, x2) -> {exp(-(x1-x2)**2/3)})");
        assert_eq!(
            cov("(per (gamma 13.2) (gamma 8.6))"),
            "((x1, x2) -> {exp(-2/13.2 * sin(2*pi/8.6 * abs(x1-x2))**2)})"
        );
    }

    #[test]
    fn composite_forms_nest_children() {
        let a = cov("(const (gamma 1))");
        let b = cov("(wn (gamma 2))");
        assert_eq!(
            cov("(+ (const (gamma 1)) (wn (gamma 2)))"),
            format!("((x1, x2) -> {{{a}(x1, x2) + {b}(x1, x2)}})")
        );
        assert_eq!(
            cov("(* (const (gamma 1)) (wn (gamma 2)))"),
            format!("((x1, x2) -> {{{a}(x1, x2) * {b}(x1, x2)}})")
        );
        let c = cov("(cp (gamma 5) (const (gamma 1)) (wn (gamma 2)))");
        assert!(c.contains("sig1 = (1-sigmoid(x1, 5, .1)) * (1-sigmoid(x2, 5, .1));"), "{c}");
        assert!(c.ends_with(&format!("sig1 * {a}(x1, x2) + sig2 * {b}(x1, x2)}})")), "{c}");
    }

    #[test]
    fn gp_program_and_errors() {
        let e = parse("(se (gamma 0.5))").unwrap();
        let t = gp_to_venture(&e).unwrap();
        assert_eq!(
            t.text,
            "assume gp = gaussian_process(gp_mean_constant(0),\n  ((x1, x2) -> {exp(-(x1-x2)**2/0.5)}));\n"
        );
        assert_eq!(t, gp_to_venture(&e).unwrap());
        assert_eq!(t.source_hash.len(), 16);
        assert!(gp_to_venture(&parse("(rbf (gamma 1))").unwrap()).is_err());
        assert!(gp_to_venture(&parse("(+ (se (gamma 1)))").unwrap()).is_err());
    }

    #[test]
    fn mixture_blocks_and_variables() {
        let schema = TableSchema::from_compact("a:numeric,b:count,c:nominal(3)").unwrap();
        let p = MixtureProgram::parse(
            "(partition (block (1 3) (cluster 4 (var 1 (normal 0 1)) (var 3 (categorical 0.5 0.25 0.25)))) \
             (block (2) (cluster 1 (var 2 (poisson 2.5))) (cluster 3 (var 2 (poisson 7)))))",
            &schema,
        )
        .unwrap();
        let t = mixture_to_venture(&p).text;
        assert_eq!(
            t,
            "assume block1_cluster =\n  categorical(simplex([1])) #block:1;\n\n\
             assume var1 = cond(\n  (block1_cluster == 0) (normal(0, 1)));\n\n\
             assume var3 = cond(\n  (block1_cluster == 0) (1 + categorical(simplex([0.5, 0.25, 0.25]))));\n\n\
             assume block2_cluster =\n  categorical(simplex([0.25, 0.75])) #block:2;\n\n\
             assume var2 = cond(\n  (block2_cluster == 0) (poisson(2.5))\n  (block2_cluster == 1) (poisson(7)));\n"
        );
    }
}
