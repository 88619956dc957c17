//! Straight-line integer stack language used as response content.
//!
//! Programs take `arity` integer arguments, run left to right, and return
//! the top of the stack. Arithmetic wraps on overflow so evaluation is total
//! and deterministic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude allowed for `PUSH`/`MOD` constants.
pub const MAX_CONST: i64 = 99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Push(i64),
    Load(u8),
    Add,
    Sub,
    Mul,
    /// Euclidean remainder of the top of stack by a non-zero constant.
    Mod(i64),
    Neg,
    Dup,
    Swap,
}

impl Instr {
    /// `(pops, pushes)`.
    fn stack_effect(self) -> (usize, usize) {
        match self {
            Instr::Push(_) | Instr::Load(_) => (0, 1),
            Instr::Add | Instr::Sub | Instr::Mul => (2, 1),
            Instr::Mod(_) | Instr::Neg => (1, 1),
            Instr::Dup => (1, 2),
            Instr::Swap => (2, 2),
        }
    }

    pub fn is_binary_arith(self) -> bool {
        matches!(self, Instr::Add | Instr::Sub | Instr::Mul)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub instructions: Vec<Instr>,
}

/// How `LOAD` operands are printed.
#[derive(Clone, Copy, Debug)]
pub enum Operands<'a> {
    /// Argument names `x, y, z, ...`.
    Symbolic,
    /// The concrete argument values.
    Concrete(&'a [i64]),
}

pub const ARG_NAMES: [char; 4] = ['x', 'y', 'z', 'w'];

impl Program {
    pub fn new(instructions: Vec<Instr>) -> Self {
        Self { instructions }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Static check: bounded constants, non-zero moduli, in-range loads, no
    /// pop from an empty stack, and a value left to return.
    pub fn validate(&self, arity: usize) -> Result<()> {
        let mut depth = 0usize;
        for (pc, &ins) in self.instructions.iter().enumerate() {
            match ins {
                Instr::Push(c) if c.abs() > MAX_CONST => {
                    return Err(Error::Validation(format!("constant {c} at {pc} exceeds {MAX_CONST}")));
                }
                Instr::Mod(0) => return Err(Error::Validation(format!("MOD by zero at {pc}"))),
                Instr::Mod(c) if c.abs() > MAX_CONST => {
                    return Err(Error::Validation(format!("modulus {c} at {pc} exceeds {MAX_CONST}")));
                }
                Instr::Load(i) if usize::from(i) >= arity => {
                    return Err(Error::Validation(format!("LOAD {i} at {pc} with arity {arity}")));
                }
                _ => {}
            }
            let (pops, pushes) = ins.stack_effect();
            if depth < pops {
                return Err(Error::Validation(format!("stack underflow at instruction {pc}")));
            }
            depth = depth - pops + pushes;
        }
        if depth == 0 {
            return Err(Error::Validation("program leaves an empty stack".into()));
        }
        Ok(())
    }

    pub fn is_stack_safe(&self, arity: usize) -> bool {
        self.validate(arity).is_ok()
    }

    /// Runs the program on `args` and returns the top of the stack.
    pub fn eval(&self, args: &[i64]) -> Result<i64> {
        self.validate(args.len())?;
        let mut stack: Vec<i64> = Vec::with_capacity(self.instructions.len());
        for &ins in &self.instructions {
            match ins {
                Instr::Push(c) => stack.push(c),
                Instr::Load(i) => stack.push(args[usize::from(i)]),
                Instr::Dup => {
                    let top = *stack.last().expect("validated");
                    stack.push(top);
                }
                Instr::Swap => {
                    let n = stack.len();
                    stack.swap(n - 1, n - 2);
                }
                Instr::Neg => {
                    let top = stack.last_mut().expect("validated");
                    *top = top.wrapping_neg();
                }
                Instr::Mod(c) => {
                    let top = stack.last_mut().expect("validated");
                    *top = top.wrapping_rem_euclid(c);
                }
                Instr::Add | Instr::Sub | Instr::Mul => {
                    let b = stack.pop().expect("validated");
                    let a = stack.pop().expect("validated");
                    stack.push(match ins {
                        Instr::Add => a.wrapping_add(b),
                        Instr::Sub => a.wrapping_sub(b),
                        _ => a.wrapping_mul(b),
                    });
                }
            }
        }
        Ok(*stack.last().expect("validated"))
    }

    /// Whether the program reproduces every expected output.
    pub fn passes(&self, inputs: &[Vec<i64>], outputs: &[i64]) -> bool {
        inputs
            .iter()
            .zip(outputs)
            .all(|(args, &want)| self.eval(args).is_ok_and(|got| got == want))
    }

    /// Space-separated postfix text, e.g. `x 3 + 2 *`.
    pub fn render(&self, operands: Operands<'_>) -> String {
        let mut out = String::new();
        for (i, &ins) in self.instructions.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match ins {
                Instr::Push(c) => out.push_str(&c.to_string()),
                Instr::Load(a) => match operands {
                    Operands::Symbolic => out.push(ARG_NAMES[usize::from(a) % ARG_NAMES.len()]),
                    Operands::Concrete(vals) => out.push_str(&vals[usize::from(a)].to_string()),
                },
                Instr::Add => out.push('+'),
                Instr::Sub => out.push('-'),
                Instr::Mul => out.push('*'),
                Instr::Mod(c) => {
                    out.push('%');
                    out.push_str(&c.to_string());
                }
                Instr::Neg => out.push_str("neg"),
                Instr::Dup => out.push_str("dup"),
                Instr::Swap => out.push_str("swap"),
            }
        }
        out
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(Operands::Symbolic))
    }
}
