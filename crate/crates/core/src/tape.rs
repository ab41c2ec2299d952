//! Minimal reverse-mode tape over the [`Engine`] primitives.
//!
//! Every primitive executes eagerly and appends a node holding exactly the
//! values its adjoint needs. Buffers are reference counted, so a node that
//! saves its input shares the allocation with the live value instead of
//! copying it. The only differentiable parameters are the pattern
//! coordinates, which enter through the NUFT nodes.

use std::rc::Rc;

use crate::engine::{self, Engine};
use crate::frame::WaveletFrame;
use crate::nuft::NuftOperator;
use crate::types::C64;

type Buf = Rc<Vec<C64>>;

#[derive(Clone, Debug)]
pub struct TapeVector {
    id: usize,
    value: Buf,
}

impl TapeVector {
    pub fn value(&self) -> &[C64] {
        &self.value
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TapeScalar {
    id: usize,
    value: f64,
}

impl TapeScalar {
    pub fn value(&self) -> f64 {
        self.value
    }
}

enum Node {
    Constant(Buf),
    ConstantScalar(f64),
    Forward { input: usize, saved: Buf },
    Adjoint { input: usize, saved: Buf },
    Synthesize { input: usize },
    Analyze { input: usize },
    Combine { terms: Vec<(f64, usize)> },
    Scale { scalar: usize, vector: usize, s: f64, v: Buf },
    Rotate { input: usize },
    Dot { a: usize, b: usize, va: Buf, vb: Buf },
    Div { a: usize, b: usize, va: f64, vb: f64 },
    ScaleScalar { c: f64, input: usize },
    SoftThreshold { input: usize, threshold: usize, u: Buf, t: f64 },
    Normalize { input: usize, out: Buf, norm: f64 },
}

impl Node {
    fn name(&self) -> &'static str {
        match self {
            Node::Constant(_) => "constant",
            Node::ConstantScalar(_) => "constant_scalar",
            Node::Forward { .. } => "nuft_forward",
            Node::Adjoint { .. } => "nuft_adjoint",
            Node::Synthesize { .. } => "synthesize",
            Node::Analyze { .. } => "analyze",
            Node::Combine { .. } => "combine",
            Node::Scale { .. } => "scale",
            Node::Rotate { .. } => "rotate",
            Node::Dot { .. } => "dot",
            Node::Div { .. } => "div",
            Node::ScaleScalar { .. } => "scale_scalar",
            Node::SoftThreshold { .. } => "soft_threshold",
            Node::Normalize { .. } => "normalize",
        }
    }
}

#[derive(Clone, Debug)]
enum Value {
    Vector(Buf),
    Scalar(f64),
}

pub struct Tape<'a> {
    op: &'a NuftOperator,
    frame: Option<&'a WaveletFrame>,
    nodes: Vec<Node>,
    first_non_finite: Option<&'static str>,
}

impl<'a> Tape<'a> {
    pub fn new(op: &'a NuftOperator, frame: Option<&'a WaveletFrame>) -> Self {
        Self { op, frame, nodes: Vec::new(), first_non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first primitive that produced a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    /// Which entries survived each recorded soft-threshold (`|u| > t`),
    /// concatenated in recording order.
    pub fn active_sets(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::SoftThreshold { u, t, .. } => Some(u.iter().map(move |z| z.norm() > *t)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn frame(&self) -> &'a WaveletFrame {
        self.frame.expect("wavelet frame required by this reconstructor")
    }

    fn push_vector(&mut self, node: Node, value: Vec<C64>) -> TapeVector {
        if self.first_non_finite.is_none() && value.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            self.first_non_finite = Some(node.name());
        }
        self.nodes.push(node);
        TapeVector { id: self.nodes.len() - 1, value: Rc::new(value) }
    }

    fn push_scalar(&mut self, node: Node, value: f64) -> TapeScalar {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(node.name());
        }
        self.nodes.push(node);
        TapeScalar { id: self.nodes.len() - 1, value }
    }

    /// Re-execute the recorded program from its constants and return the
    /// value of scalar `target`.
    pub fn replay(&self, target: &TapeScalar) -> f64 {
        let mut values: Vec<Option<Value>> = Vec::with_capacity(target.id + 1);
        let vec = |values: &[Option<Value>], id: usize| match &values[id] {
            Some(Value::Vector(v)) => v.clone(),
            _ => unreachable!("node {id} is not a vector"),
        };
        let sca = |values: &[Option<Value>], id: usize| match &values[id] {
            Some(Value::Scalar(s)) => *s,
            _ => unreachable!("node {id} is not a scalar"),
        };
        for node in &self.nodes[..=target.id] {
            let v = match node {
                Node::Constant(b) => Value::Vector(b.clone()),
                Node::ConstantScalar(s) => Value::Scalar(*s),
                Node::Forward { input, .. } => Value::Vector(Rc::new(self.op.forward_raw(&vec(&values, *input)))),
                Node::Adjoint { input, .. } => Value::Vector(Rc::new(self.op.adjoint_raw(&vec(&values, *input)))),
                Node::Synthesize { input } => Value::Vector(Rc::new(self.frame().synthesize_raw(&vec(&values, *input)))),
                Node::Analyze { input } => Value::Vector(Rc::new(self.frame().analyze_raw(&vec(&values, *input)))),
                Node::Combine { terms } => {
                    let bufs: Vec<(f64, Buf)> = terms.iter().map(|&(c, id)| (c, vec(&values, id))).collect();
                    let raw: Vec<(f64, &[C64])> = bufs.iter().map(|(c, b)| (*c, b.as_slice())).collect();
                    Value::Vector(Rc::new(engine::combine_raw(&raw)))
                }
                Node::Scale { scalar, vector, .. } => {
                    let s = sca(&values, *scalar);
                    Value::Vector(Rc::new(vec(&values, *vector).iter().map(|z| z * s).collect()))
                }
                Node::Rotate { input } => Value::Vector(Rc::new(engine::rotate_raw(&vec(&values, *input)))),
                Node::Dot { a, b, .. } => Value::Scalar(engine::dot_raw(&vec(&values, *a), &vec(&values, *b))),
                Node::Div { a, b, .. } => Value::Scalar(sca(&values, *a) / sca(&values, *b)),
                Node::ScaleScalar { c, input } => Value::Scalar(c * sca(&values, *input)),
                Node::SoftThreshold { input, threshold, .. } => Value::Vector(Rc::new(engine::soft_threshold_raw(
                    &vec(&values, *input),
                    sca(&values, *threshold),
                ))),
                Node::Normalize { input, .. } => Value::Vector(Rc::new(engine::normalize_raw(&vec(&values, *input)).0)),
            };
            values.push(Some(v));
        }
        sca(&values, target.id)
    }

    /// Reverse sweep from `output`; returns `d output / d coords` laid out like
    /// the pattern coordinates.
    pub fn backward(&self, output: &TapeScalar) -> Vec<f64> {
        let mut grad = vec![0.0; self.op.pattern().coords().len()];
        let mut cot: Vec<Option<Value>> = vec![None; output.id + 1];
        cot[output.id] = Some(Value::Scalar(1.0));

        fn add_vec(cot: &mut [Option<Value>], id: usize, g: Vec<C64>) {
            match &mut cot[id] {
                Some(Value::Vector(acc)) => {
                    for (a, b) in Rc::make_mut(acc).iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(Value::Vector(Rc::new(g))),
            }
        }
        fn add_scalar(cot: &mut [Option<Value>], id: usize, g: f64) {
            match &mut cot[id] {
                Some(Value::Scalar(acc)) => *acc += g,
                slot => *slot = Some(Value::Scalar(g)),
            }
        }

        for id in (0..=output.id).rev() {
            let Some(c) = cot[id].take() else { continue };
            match (&self.nodes[id], c) {
                (Node::Constant(_) | Node::ConstantScalar(_), _) => {}
                (Node::Forward { input, saved }, Value::Vector(g)) => {
                    add_vec(&mut cot, *input, self.op.adjoint_raw(&g));
                    let (_, gp) = self.op.forward_vjp_raw(saved, &g);
                    accumulate(&mut grad, &gp);
                }
                (Node::Adjoint { input, saved }, Value::Vector(g)) => {
                    // Re<g, A^H r> = Re<r, A g>
                    let (ag, gp) = self.op.forward_vjp_raw(&g, saved);
                    add_vec(&mut cot, *input, ag);
                    accumulate(&mut grad, &gp);
                }
                (Node::Synthesize { input }, Value::Vector(g)) => {
                    add_vec(&mut cot, *input, self.frame().analyze_raw(&g));
                }
                (Node::Analyze { input }, Value::Vector(g)) => {
                    add_vec(&mut cot, *input, self.frame().synthesize_raw(&g));
                }
                (Node::Combine { terms }, Value::Vector(g)) => {
                    for &(c, input) in terms {
                        add_vec(&mut cot, input, g.iter().map(|z| z * c).collect());
                    }
                }
                (Node::Scale { scalar, vector, s, v }, Value::Vector(g)) => {
                    add_scalar(&mut cot, *scalar, engine::dot_raw(&g, v));
                    add_vec(&mut cot, *vector, g.iter().map(|z| z * *s).collect());
                }
                (Node::Rotate { input }, Value::Vector(g)) => {
                    add_vec(&mut cot, *input, g.iter().map(|z| C64::new(z.im, -z.re)).collect());
                }
                (Node::Dot { a, b, va, vb }, Value::Scalar(g)) => {
                    add_vec(&mut cot, *a, vb.iter().map(|z| z * g).collect());
                    add_vec(&mut cot, *b, va.iter().map(|z| z * g).collect());
                }
                (Node::Div { a, b, va, vb }, Value::Scalar(g)) => {
                    add_scalar(&mut cot, *a, g / vb);
                    add_scalar(&mut cot, *b, -g * va / (vb * vb));
                }
                (Node::ScaleScalar { c, input }, Value::Scalar(g)) => add_scalar(&mut cot, *input, c * g),
                (Node::SoftThreshold { input, threshold, u, t }, Value::Vector(g)) => {
                    let mut gt = 0.0;
                    let gu: Vec<C64> = u
                        .iter()
                        .zip(g.iter())
                        .map(|(&z, &go)| {
                            let mag = z.norm();
                            // kink |z| == t takes the zero branch
                            if mag <= *t {
                                return C64::new(0.0, 0.0);
                            }
                            let dir = z / mag;
                            let along = go.re * dir.re + go.im * dir.im;
                            gt -= along;
                            go - (go - dir * along) * (*t / mag)
                        })
                        .collect();
                    add_vec(&mut cot, *input, gu);
                    add_scalar(&mut cot, *threshold, gt);
                }
                (Node::Normalize { input, out, norm }, Value::Vector(g)) => {
                    let along = engine::dot_raw(out, &g);
                    add_vec(&mut cot, *input, g.iter().zip(out.iter()).map(|(gi, oi)| (gi - oi * along) / *norm).collect());
                }
                (node, _) => unreachable!("cotangent kind does not match node `{}`", node.name()),
            }
        }
        grad
    }
}

fn accumulate(grad: &mut [f64], part: &[f64]) {
    for (g, p) in grad.iter_mut().zip(part) {
        *g += p;
    }
}

impl Engine for Tape<'_> {
    type Vector = TapeVector;
    type Scalar = TapeScalar;

    fn vector_value<'v>(&self, v: &'v TapeVector) -> &'v [C64] {
        &v.value
    }

    fn scalar_value(&self, s: &TapeScalar) -> f64 {
        s.value
    }

    fn domain_len(&self, coeffs: bool) -> usize {
        if coeffs {
            self.frame().num_coeffs()
        } else {
            self.op.grid().len()
        }
    }

    fn constant(&mut self, data: Vec<C64>) -> TapeVector {
        let buf = Rc::new(data);
        self.nodes.push(Node::Constant(buf.clone()));
        TapeVector { id: self.nodes.len() - 1, value: buf }
    }

    fn constant_scalar(&mut self, value: f64) -> TapeScalar {
        self.push_scalar(Node::ConstantScalar(value), value)
    }

    fn forward(&mut self, x: &TapeVector) -> TapeVector {
        let value = self.op.forward_raw(&x.value);
        self.push_vector(Node::Forward { input: x.id, saved: x.value.clone() }, value)
    }

    fn adjoint(&mut self, y: &TapeVector) -> TapeVector {
        let value = self.op.adjoint_raw(&y.value);
        self.push_vector(Node::Adjoint { input: y.id, saved: y.value.clone() }, value)
    }

    fn synthesize(&mut self, z: &TapeVector) -> TapeVector {
        let value = self.frame().synthesize_raw(&z.value);
        self.push_vector(Node::Synthesize { input: z.id }, value)
    }

    fn analyze(&mut self, x: &TapeVector) -> TapeVector {
        let value = self.frame().analyze_raw(&x.value);
        self.push_vector(Node::Analyze { input: x.id }, value)
    }

    fn combine(&mut self, terms: &[(f64, &TapeVector)]) -> TapeVector {
        let raw: Vec<(f64, &[C64])> = terms.iter().map(|(c, v)| (*c, v.value.as_slice())).collect();
        let value = engine::combine_raw(&raw);
        self.push_vector(Node::Combine { terms: terms.iter().map(|(c, v)| (*c, v.id)).collect() }, value)
    }

    fn scale(&mut self, s: &TapeScalar, v: &TapeVector) -> TapeVector {
        let value = v.value.iter().map(|z| z * s.value).collect();
        self.push_vector(Node::Scale { scalar: s.id, vector: v.id, s: s.value, v: v.value.clone() }, value)
    }

    fn rotate(&mut self, v: &TapeVector) -> TapeVector {
        self.push_vector(Node::Rotate { input: v.id }, engine::rotate_raw(&v.value))
    }

    fn dot(&mut self, a: &TapeVector, b: &TapeVector) -> TapeScalar {
        let value = engine::dot_raw(&a.value, &b.value);
        self.push_scalar(Node::Dot { a: a.id, b: b.id, va: a.value.clone(), vb: b.value.clone() }, value)
    }

    fn div(&mut self, a: &TapeScalar, b: &TapeScalar) -> TapeScalar {
        self.push_scalar(Node::Div { a: a.id, b: b.id, va: a.value, vb: b.value }, a.value / b.value)
    }

    fn scale_scalar(&mut self, c: f64, s: &TapeScalar) -> TapeScalar {
        self.push_scalar(Node::ScaleScalar { c, input: s.id }, c * s.value)
    }

    fn soft_threshold(&mut self, v: &TapeVector, t: &TapeScalar) -> TapeVector {
        let value = engine::soft_threshold_raw(&v.value, t.value);
        self.push_vector(Node::SoftThreshold { input: v.id, threshold: t.id, u: v.value.clone(), t: t.value }, value)
    }

    fn normalize(&mut self, v: &TapeVector) -> TapeVector {
        let (value, norm) = engine::normalize_raw(&v.value);
        let out = Rc::new(value);
        let node = Node::Normalize { input: v.id, out: out.clone(), norm };
        if self.first_non_finite.is_none() && out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            self.first_non_finite = Some(node.name());
        }
        self.nodes.push(node);
        TapeVector { id: self.nodes.len() - 1, value: out }
    }
}
