//! Compiled real-valued expressions over named variables.
//!
//! Thin wrapper over `evalexpr`: the expression is parsed once, every
//! variable is bound as a float, and `pi` is always available. Math
//! functions use the `math::` prefix (`math::sin(x)`, `math::ln(d)`).

use evalexpr::{build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node, Value};

use crate::error::{BbmError, Result};

#[derive(Clone, Debug)]
pub struct Expr {
    source: String,
    tree: Node<DefaultNumericTypes>,
    vars: Vec<&'static str>,
}

impl Expr {
    /// Parses `source`; `vars` lists the names the caller will bind, in the
    /// order values are later passed to [`Expr::eval`].
    pub fn compile(source: &str, vars: &[&'static str]) -> Result<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(source)
            .map_err(|e| BbmError::Expression(format!("{source}: {e}")))?;
        let expr = Expr { source: source.to_string(), tree, vars: vars.to_vec() };
        // surface unknown identifiers at compile time
        let probe = vec![0.5; vars.len()];
        expr.eval(&probe)?;
        Ok(expr)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, values: &[f64]) -> Result<f64> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        let set = |ctx: &mut HashMapContext, name: &str, v: f64| {
            ctx.set_value(name.to_string(), Value::Float(v))
                .map_err(|e| BbmError::Expression(format!("{name}: {e}")))
        };
        set(&mut ctx, "pi", std::f64::consts::PI)?;
        for (name, &v) in self.vars.iter().zip(values) {
            set(&mut ctx, name, v)?;
        }
        self.tree
            .eval_number_with_context(&ctx)
            .map_err(|e| BbmError::Expression(format!("{}: {e}", self.source)))
    }
}
