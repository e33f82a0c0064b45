//! A small arithmetic expression grammar for user-defined models.
//!
//! Supported syntax: `+ - * / ^` (with `^` right-associative and binding
//! tighter than unary minus), parentheses, numeric literals, the unary
//! functions `exp`, `log`, `sin`, `cos`, and a caller-supplied variable
//! list. Identifiers are resolved at parse time; unknown names are a hard
//! error with a byte position, so configuration typos surface immediately
//! rather than as silent zeros.
//!
//! Models built from expressions carry no analytic derivatives; the
//! finite-difference fallbacks in the coefficient containers take over.

use super::{Coefficient, ControlSet, Dims, DriverFn, ModelSpec, RunningCost, ScalarStateFn};
use crate::error::{CoreError, Result};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            '-' => {
                out.push((i, Tok::Minus));
                i += 1;
            }
            '*' => {
                out.push((i, Tok::Star));
                i += 1;
            }
            '/' => {
                out.push((i, Tok::Slash));
                i += 1;
            }
            '^' => {
                out.push((i, Tok::Caret));
                i += 1;
            }
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, '0'..='9' | '.' | 'e' | 'E')
                {
                    // Accept an exponent sign directly after e/E.
                    if matches!(bytes[i] as char, 'e' | 'E')
                        && i + 1 < bytes.len()
                        && matches!(bytes[i + 1] as char, '+' | '-')
                    {
                        i += 1;
                    }
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| {
                    CoreError::InvalidInput(format!(
                        "expression: invalid number `{text}` at byte {start}"
                    ))
                })?;
                out.push((start, Tok::Num(v)));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push((start, Tok::Ident(src[start..i].to_string())));
            }
            _ => {
                return Err(CoreError::InvalidInput(format!(
                    "expression: unexpected character `{c}` at byte {i}"
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Ast {
    Num(f64),
    Var(usize),
    Neg(Box<Ast>),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Pow(Box<Ast>, Box<Ast>),
    Exp(Box<Ast>),
    Log(Box<Ast>),
    Sin(Box<Ast>),
    Cos(Box<Ast>),
}

impl Ast {
    fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Ast::Num(v) => *v,
            Ast::Var(i) => vars[*i],
            Ast::Neg(a) => -a.eval(vars),
            Ast::Add(a, b) => a.eval(vars) + b.eval(vars),
            Ast::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Ast::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Ast::Div(a, b) => a.eval(vars) / b.eval(vars),
            Ast::Pow(a, b) => a.eval(vars).powf(b.eval(vars)),
            Ast::Exp(a) => a.eval(vars).exp(),
            Ast::Log(a) => a.eval(vars).ln(),
            Ast::Sin(a) => a.eval(vars).sin(),
            Ast::Cos(a) => a.eval(vars).cos(),
        }
    }
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    vars: &'a [&'a str],
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn bump(&mut self) -> Option<&(usize, Tok)> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn err(&self, msg: &str) -> CoreError {
        let at = self
            .toks
            .get(self.pos)
            .map(|(p, _)| p.to_string())
            .unwrap_or_else(|| "end".into());
        CoreError::InvalidInput(format!("expression `{}`: {msg} at byte {at}", self.src))
    }

    fn expr(&mut self) -> Result<Ast> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Ast::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Ast::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Ast> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Ast::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Ast::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Ast> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.pos += 1;
            return Ok(Ast::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.pos += 1;
            // Right-associative; the exponent may carry a unary minus.
            let exp = self.unary()?;
            return Ok(Ast::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Ast> {
        let (at, tok) = match self.bump() {
            Some(t) => (t.0, t.1.clone()),
            None => return Err(self.err("unexpected end of expression")),
        };
        match tok {
            Tok::Num(v) => Ok(Ast::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                match self.bump() {
                    Some((_, Tok::RParen)) => Ok(inner),
                    _ => Err(self.err("expected `)`")),
                }
            }
            Tok::Ident(name) => {
                if matches!(self.peek(), Some(Tok::LParen)) {
                    self.pos += 1;
                    let arg = Box::new(self.expr()?);
                    match self.bump() {
                        Some((_, Tok::RParen)) => {}
                        _ => return Err(self.err("expected `)` after function argument")),
                    }
                    match name.as_str() {
                        "exp" => Ok(Ast::Exp(arg)),
                        "log" => Ok(Ast::Log(arg)),
                        "sin" => Ok(Ast::Sin(arg)),
                        "cos" => Ok(Ast::Cos(arg)),
                        _ => Err(CoreError::InvalidInput(format!(
                            "expression `{}`: unknown function `{name}` at byte {at}",
                            self.src
                        ))),
                    }
                } else {
                    match self.vars.iter().position(|v| *v == name) {
                        Some(idx) => Ok(Ast::Var(idx)),
                        None => Err(CoreError::InvalidInput(format!(
                            "expression `{}`: unknown variable `{name}` at byte {at} \
                             (allowed: {})",
                            self.src,
                            self.vars.join(", ")
                        ))),
                    }
                }
            }
            _ => Err(CoreError::InvalidInput(format!(
                "expression `{}`: unexpected token at byte {at}",
                self.src
            ))),
        }
    }
}

/// A parsed expression bound to a fixed variable list.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    ast: Arc<Ast>,
    pub n_vars: usize,
}

impl CompiledExpr {
    /// Evaluates with one slot per variable, in the order given to
    /// [`parse`].
    pub fn eval(&self, vars: &[f64]) -> f64 {
        debug_assert_eq!(vars.len(), self.n_vars);
        self.ast.eval(vars)
    }
}

/// Parses `src` against an ordered variable list.
pub fn parse(src: &str, variables: &[&str]) -> Result<CompiledExpr> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        vars: variables,
        src,
    };
    let ast = p.expr()?;
    if p.pos != toks.len() {
        return Err(p.err("trailing input"));
    }
    Ok(CompiledExpr {
        ast: Arc::new(ast),
        n_vars: variables.len(),
    })
}

/// Textual definition of a scalar custom model (`L = d = k = 1`).
///
/// Per-regime lists may hold either one expression (shared by all regimes)
/// or exactly one per regime. Coefficient expressions see `t, x, u`;
/// terminal expressions see `x`; driver expressions see
/// `t, x, y, z, kappa_1, …, kappa_D, u`.
#[derive(Clone, Debug)]
pub struct CustomModelDef {
    pub regimes: usize,
    pub drift: Vec<String>,
    pub diffusion: Vec<String>,
    /// `jump[i][j]`: loading on jumps into regime `j`; outer list may have
    /// one shared row or one row per regime.
    pub jump: Vec<Vec<String>>,
    pub running_cost: Option<Vec<String>>,
    pub terminal_cost: Option<Vec<String>>,
    pub driver: Option<Vec<String>>,
    pub terminal_value: Option<Vec<String>>,
    pub control_lo: f64,
    pub control_hi: f64,
}

fn broadcast<'v, T>(name: &str, list: &'v [T], regimes: usize) -> Result<Vec<&'v T>> {
    match list.len() {
        1 => Ok(vec![&list[0]; regimes]),
        n if n == regimes => Ok(list.iter().collect()),
        n => Err(CoreError::DimensionMismatch(format!(
            "{name}: expected 1 or {regimes} expressions, got {n}"
        ))),
    }
}

fn compile_per_regime(name: &str, list: &[String], regimes: usize, vars: &[&str]) -> Result<Vec<CompiledExpr>> {
    broadcast(name, list, regimes)?
        .into_iter()
        .map(|s| parse(s, vars))
        .collect()
}

/// Builds a [`ModelSpec`] from expression text. All derivatives fall back
/// to finite differences.
pub fn build_custom(def: &CustomModelDef) -> Result<ModelSpec> {
    let d = def.regimes;
    if d == 0 {
        return Err(CoreError::InvalidInput("custom model needs at least one regime".into()));
    }
    if !(def.control_lo.is_finite() && def.control_hi.is_finite() && def.control_lo <= def.control_hi) {
        return Err(CoreError::InvalidInput(format!(
            "control bounds [{}, {}] are not a valid interval",
            def.control_lo, def.control_hi
        )));
    }
    let coef_vars: &[&str] = &["t", "x", "u"];
    let drift = compile_per_regime("drift", &def.drift, d, coef_vars)?;
    let diffusion = compile_per_regime("diffusion", &def.diffusion, d, coef_vars)?;
    let jump_rows = broadcast("jump", &def.jump, d)?;
    let mut jump = Vec::with_capacity(d);
    for row in jump_rows {
        if row.len() != d {
            return Err(CoreError::DimensionMismatch(format!(
                "jump row must have {d} entries, got {}",
                row.len()
            )));
        }
        let compiled: Vec<CompiledExpr> = row
            .iter()
            .map(|s| parse(s, coef_vars))
            .collect::<Result<_>>()?;
        jump.push(compiled);
    }

    let mk_coef = |exprs: Vec<CompiledExpr>| {
        Coefficient::new(1, 1, move |t, x, u, r, out: &mut [f64]| {
            out[0] = exprs[r].eval(&[t, x[0], u[0]]);
        })
    };
    let drift_coef = mk_coef(drift);
    let diffusion_coef = mk_coef(diffusion);
    let jump_coef = Coefficient::new(1, d, move |t, x, u, r, out: &mut [f64]| {
        for (j, o) in out.iter_mut().enumerate() {
            *o = jump[r][j].eval(&[t, x[0], u[0]]);
        }
    });

    let running_cost = match &def.running_cost {
        Some(list) => {
            let exprs = compile_per_regime("running_cost", list, d, coef_vars)?;
            Some(RunningCost::new(move |t, x, u, r| exprs[r].eval(&[t, x[0], u[0]])))
        }
        None => None,
    };
    let term_vars: &[&str] = &["x"];
    let terminal_cost = match &def.terminal_cost {
        Some(list) => {
            let exprs = compile_per_regime("terminal_cost", list, d, term_vars)?;
            Some(ScalarStateFn::new(move |x, r| exprs[r].eval(&[x[0]])))
        }
        None => None,
    };
    let terminal_value = match &def.terminal_value {
        Some(list) => {
            let exprs = compile_per_regime("terminal_value", list, d, term_vars)?;
            Some(ScalarStateFn::new(move |x, r| exprs[r].eval(&[x[0]])))
        }
        None => None,
    };
    let driver = match &def.driver {
        Some(list) => {
            let mut names: Vec<String> = vec!["t".into(), "x".into(), "y".into(), "z".into()];
            for j in 1..=d {
                names.push(format!("kappa_{j}"));
            }
            names.push("u".into());
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let exprs = compile_per_regime("driver", list, d, &refs)?;
            Some(DriverFn::new(d, move |t, x, y, z, kappa, u, r| {
                let mut slots = Vec::with_capacity(5 + kappa.len());
                slots.extend_from_slice(&[t, x, y, z]);
                slots.extend_from_slice(kappa);
                slots.push(u[0]);
                exprs[r].eval(&slots)
            }))
        }
        None => None,
    };

    if driver.is_some() != terminal_value.is_some() {
        return Err(CoreError::ModelInconsistency(
            "driver and terminal_value must be given together".into(),
        ));
    }

    let spec = ModelSpec {
        dims: Dims {
            state: 1,
            brownian: 1,
            regimes: d,
            control: 1,
        },
        drift: drift_coef,
        diffusion: diffusion_coef,
        jump: jump_coef,
        driver,
        terminal_y: terminal_value,
        running_cost,
        terminal_cost,
        control_set: ControlSet::interval(def.control_lo, def.control_hi),
    };
    spec.check_shapes()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(src: &str) -> f64 {
        parse(src, &[]).unwrap().eval(&[])
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval1("2+3*4"), 14.0);
        assert_eq!(eval1("(2+3)*4"), 20.0);
        assert_eq!(eval1("2^3^2"), 512.0); // right-associative
        assert_eq!(eval1("-2^2"), -4.0); // ^ binds tighter than unary minus
        assert_eq!(eval1("6/3/2"), 1.0); // left-associative division
        assert_eq!(eval1("2^-1"), 0.5);
    }

    #[test]
    fn functions_and_variables() {
        let e = parse("exp(x) + sin(t)*u", &["t", "x", "u"]).unwrap();
        let v = e.eval(&[0.5, 1.0, 2.0]);
        assert!((v - (1f64.exp() + 0.5f64.sin() * 2.0)).abs() < 1e-15);
        assert!((eval1("log(exp(1))") - 1.0).abs() < 1e-15);
        assert!((eval1("cos(0)") - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(eval1("1e-3"), 1e-3);
        assert_eq!(eval1("2.5E+2"), 250.0);
    }

    #[test]
    fn unknown_variable_is_an_error_with_position() {
        let err = parse("x + bogus", &["x"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("byte 4"), "{msg}");
        assert!(msg.contains("allowed: x"), "{msg}");
    }

    #[test]
    fn unknown_function_and_trailing_input_are_errors() {
        assert!(parse("tan(1)", &[]).is_err());
        assert!(parse("1 2", &[]).is_err());
        assert!(parse("(1+2", &[]).is_err());
        assert!(parse("1+", &[]).is_err());
    }

    #[test]
    fn custom_model_builds_and_evaluates() {
        let def = CustomModelDef {
            regimes: 2,
            drift: vec!["0.1*x".into()],
            diffusion: vec!["u*(1+0.2*sin(x))".into(), "0.8*u".into()],
            jump: vec![vec!["0".into(), "0.1*u".into()], vec!["0.2*u".into(), "0".into()]],
            running_cost: Some(vec!["-0.5*u".into()]),
            terminal_cost: Some(vec!["x^2/2".into()]),
            driver: None,
            terminal_value: None,
            control_lo: 0.0,
            control_hi: 1.0,
        };
        let spec = build_custom(&def).unwrap();
        let mut s = [0.0];
        spec.diffusion.value_into(0.0, &[0.0], &[0.5], 1, &mut s);
        assert_eq!(s[0], 0.4);
        let mut g = [0.0; 2];
        spec.jump.value_into(0.0, &[0.0], &[1.0], 1, &mut g);
        assert_eq!(g, [0.2, 0.0]);
        // FD derivative of the modulated diffusion.
        let mut dx = [0.0];
        spec.diffusion.dx_into(0.0, &[0.3], &[1.0], 0, &mut dx);
        assert!((dx[0] - 0.2 * 0.3f64.cos()).abs() < 1e-7);
    }

    #[test]
    fn driver_without_terminal_value_is_rejected() {
        let def = CustomModelDef {
            regimes: 1,
            drift: vec!["0".into()],
            diffusion: vec!["u".into()],
            jump: vec![vec!["0".into()]],
            running_cost: None,
            terminal_cost: None,
            driver: Some(vec!["z + kappa_1^2".into()]),
            terminal_value: None,
            control_lo: 0.0,
            control_hi: 1.0,
        };
        assert!(build_custom(&def).is_err());
    }
}
