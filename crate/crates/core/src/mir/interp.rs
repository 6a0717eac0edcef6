//! Deterministic concrete interpreter.

use thiserror::Error;

use super::*;

const WORDS: usize = (MEM_SIZE / 8) as usize;
const MAX_CALL_DEPTH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    OutOfBounds { addr: u64 },
    Misaligned { addr: u64 },
    DivByZero,
    StackOverflow,
}

/// Observable behavior: the return value plus the ordered stores into the
/// output region.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub value: u64,
    pub output: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Returned(Observation),
    BudgetExhausted,
    Fault(Fault),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RunError {
    #[error("entry function takes {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
}

/// A state write observed during execution, at call depth `depth` (0 is the
/// function the run started in).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WriteEvent {
    Reg { depth: usize, reg: Reg, value: u64 },
    FReg { depth: usize, reg: FReg, value: u64 },
    Flags { depth: usize, flags: Flags },
    Mem { depth: usize, addr: u64, value: u64 },
}

/// Execution hooks. All methods default to no-ops.
pub trait Tracer {
    /// Whether `write` should be called at all.
    const WANTS_WRITES: bool = false;

    fn block(&mut self, _func: usize, _block: usize, _depth: usize) {}
    fn branch(&mut self, _func: usize, _block: usize, _taken: bool) {}
    fn write(&mut self, _ev: WriteEvent) {}
}

pub struct NoTrace;
impl Tracer for NoTrace {}

#[derive(Clone, Debug)]
enum XTerm {
    Jump(usize),
    Cond { cond: Cond, taken: usize, fall: usize },
    Ret(Reg),
    Call { callee: usize, then: usize },
}

#[derive(Clone, Debug)]
struct XBlock {
    insts: Vec<Inst>,
    term: XTerm,
}

#[derive(Clone, Debug)]
struct XFunc {
    arity: usize,
    blocks: Vec<XBlock>,
}

struct Frame {
    func: usize,
    block: usize,
    regs: [u64; NUM_REGS],
    fregs: [u64; NUM_FREGS],
    flags: Flags,
}

/// A validated program with labels resolved to indices, reusable across many
/// runs. Memory is reset between runs by clearing only the touched words.
pub struct Executable {
    funcs: Vec<XFunc>,
    entry: usize,
    mem: Vec<u64>,
    touched: Vec<usize>,
}

impl Executable {
    pub fn new(p: &Program) -> Executable {
        let fidx: HashMap<&str, usize> =
            p.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
        let funcs = p
            .functions
            .iter()
            .map(|f| {
                let map = f.label_map();
                XFunc {
                    arity: f.arity,
                    blocks: f
                        .blocks
                        .iter()
                        .map(|b| XBlock {
                            insts: b.insts.clone(),
                            term: match &b.term {
                                Terminator::Jump(l) => XTerm::Jump(map[l.as_str()]),
                                Terminator::CondJump { cond, taken, fallthrough } => XTerm::Cond {
                                    cond: *cond,
                                    taken: map[taken.as_str()],
                                    fall: map[fallthrough.as_str()],
                                },
                                Terminator::Return(r) => XTerm::Ret(*r),
                                Terminator::Call { callee, then } => XTerm::Call {
                                    callee: fidx[callee.as_str()],
                                    then: map[then.as_str()],
                                },
                            },
                        })
                        .collect(),
                }
            })
            .collect();
        Executable { funcs, entry: fidx[p.entry.as_str()], mem: vec![0; WORDS], touched: Vec::new() }
    }

    pub fn entry_arity(&self) -> usize {
        self.funcs[self.entry].arity
    }

    fn reset_memory(&mut self) {
        for w in self.touched.drain(..) {
            self.mem[w] = 0;
        }
    }

    fn word(addr: u64) -> Result<usize, Fault> {
        if addr % 8 != 0 {
            return Err(Fault::Misaligned { addr });
        }
        if addr >= MEM_SIZE {
            return Err(Fault::OutOfBounds { addr });
        }
        Ok((addr / 8) as usize)
    }

    pub fn run(&mut self, inputs: &[u64], env: &Env, budget: u64) -> Result<Outcome, RunError> {
        self.run_traced(inputs, env, budget, &mut NoTrace)
    }

    pub fn run_traced<T: Tracer>(
        &mut self,
        inputs: &[u64],
        env: &Env,
        budget: u64,
        tracer: &mut T,
    ) -> Result<Outcome, RunError> {
        let arity = self.entry_arity();
        if inputs.len() != arity {
            return Err(RunError::Arity { expected: arity, got: inputs.len() });
        }
        self.reset_memory();
        let mut regs = [0u64; NUM_REGS];
        regs[..arity].copy_from_slice(inputs);
        let out = self.exec(regs, env, budget, tracer);
        Ok(out)
    }

    fn exec<T: Tracer>(&mut self, regs: [u64; NUM_REGS], env: &Env, budget: u64, tracer: &mut T) -> Outcome {
        let mut steps: u64 = 0;
        let mut output = Vec::new();
        let mut stack: Vec<(Frame, usize)> = Vec::new(); // caller frame, block to resume
        let mut fr = Frame { func: self.entry, block: 0, regs, fregs: [0; NUM_FREGS], flags: Flags::default() };
        loop {
            let depth = stack.len();
            tracer.block(fr.func, fr.block, depth);
            let nblock = {
                let block = &self.funcs[fr.func].blocks[fr.block];
                for inst in &block.insts {
                    steps += 1;
                    if steps > budget {
                        return Outcome::BudgetExhausted;
                    }
                    match *inst {
                        Inst::Bin { op, dst, lhs, rhs } => {
                            let b = match rhs {
                                Src::Reg(r) => fr.regs[r.0 as usize],
                                Src::Imm(v) => v,
                            };
                            let Some(v) = op.eval(fr.regs[lhs.0 as usize], b) else {
                                return Outcome::Fault(Fault::DivByZero);
                            };
                            fr.regs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Reg { depth, reg: dst, value: v });
                            }
                        }
                        Inst::Un { op, dst, src } => {
                            let v = op.eval(fr.regs[src.0 as usize]);
                            fr.regs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Reg { depth, reg: dst, value: v });
                            }
                        }
                        Inst::MovImm { dst, imm } => {
                            fr.regs[dst.0 as usize] = imm;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Reg { depth, reg: dst, value: imm });
                            }
                        }
                        Inst::Cmp { lhs, rhs } => {
                            let b = match rhs {
                                Src::Reg(r) => fr.regs[r.0 as usize],
                                Src::Imm(v) => v,
                            };
                            fr.flags = Flags::from_cmp(fr.regs[lhs.0 as usize], b);
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Flags { depth, flags: fr.flags });
                            }
                        }
                        Inst::Load { dst, addr } => {
                            let a = fr.regs[addr.base.0 as usize].wrapping_add(addr.disp as u64);
                            let w = match Self::word(a) {
                                Ok(w) => w,
                                Err(f) => return Outcome::Fault(f),
                            };
                            let v = self.mem[w];
                            fr.regs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Reg { depth, reg: dst, value: v });
                            }
                        }
                        Inst::Store { addr, src } => {
                            let a = fr.regs[addr.base.0 as usize].wrapping_add(addr.disp as u64);
                            let w = match Self::word(a) {
                                Ok(w) => w,
                                Err(f) => return Outcome::Fault(f),
                            };
                            let v = fr.regs[src.0 as usize];
                            self.mem[w] = v;
                            self.touched.push(w);
                            if a >= OUTPUT_BASE {
                                output.push((a, v));
                            }
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Mem { depth, addr: a, value: v });
                            }
                        }
                        Inst::FBin { op, dst, lhs, rhs } => {
                            let v = op.eval(fr.fregs[lhs.0 as usize], fr.fregs[rhs.0 as usize]);
                            fr.fregs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::FReg { depth, reg: dst, value: v });
                            }
                        }
                        Inst::Fcmp { dst, lhs, rhs } => {
                            let v = fcmp_code(fr.fregs[lhs.0 as usize], fr.fregs[rhs.0 as usize]);
                            fr.regs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Reg { depth, reg: dst, value: v });
                            }
                        }
                        Inst::Itof { dst, src } => {
                            let v = itof_bits(fr.regs[src.0 as usize]);
                            fr.fregs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::FReg { depth, reg: dst, value: v });
                            }
                        }
                        Inst::GetEnv { dst, slot } => {
                            let v = env[slot as usize];
                            fr.regs[dst.0 as usize] = v;
                            if T::WANTS_WRITES {
                                tracer.write(WriteEvent::Reg { depth, reg: dst, value: v });
                            }
                        }
                    }
                }
                steps += 1;
                if steps > budget {
                    return Outcome::BudgetExhausted;
                }
                match block.term {
                    XTerm::Jump(t) => Some(t),
                    XTerm::Cond { cond, taken, fall } => {
                        let t = cond.holds(fr.flags);
                        tracer.branch(fr.func, fr.block, t);
                        Some(if t { taken } else { fall })
                    }
                    XTerm::Ret(r) => {
                        let v = fr.regs[r.0 as usize];
                        match stack.pop() {
                            None => return Outcome::Returned(Observation { value: v, output }),
                            Some((mut caller, resume)) => {
                                caller.regs[0] = v;
                                caller.block = resume;
                                fr = caller;
                                if T::WANTS_WRITES {
                                    tracer.write(WriteEvent::Reg { depth: depth - 1, reg: Reg(0), value: v });
                                }
                                None
                            }
                        }
                    }
                    XTerm::Call { callee, then } => {
                        if stack.len() >= MAX_CALL_DEPTH {
                            return Outcome::Fault(Fault::StackOverflow);
                        }
                        let k = self.funcs[callee].arity;
                        let mut regs = [0u64; NUM_REGS];
                        regs[..k].copy_from_slice(&fr.regs[..k]);
                        let callee_frame =
                            Frame { func: callee, block: 0, regs, fregs: [0; NUM_FREGS], flags: Flags::default() };
                        stack.push((std::mem::replace(&mut fr, callee_frame), then));
                        None
                    }
                }
            };
            if let Some(b) = nblock {
                fr.block = b;
            }
        }
    }
}

/// One-shot convenience wrapper around [`Executable`].
pub fn concrete_run(p: &Program, inputs: &[u64], env: &Env, step_budget: u64) -> Result<Outcome, RunError> {
    Executable::new(p).run(inputs, env, step_budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_asm;

    const ENV0: Env = [0; ENV_SLOTS];

    fn ret(p: &str, inputs: &[u64]) -> Outcome {
        concrete_run(&parse_asm(p).unwrap(), inputs, &ENV0, 10_000).unwrap()
    }

    fn value(o: Outcome) -> u64 {
        match o {
            Outcome::Returned(obs) => obs.value,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity() {
        assert_eq!(value(ret("fn id(1 args)\ne:\n    ret r0\n", &[7])), 7);
    }

    #[test]
    fn consecutive_product_is_even() {
        let src = "fn f(1 args)\ne:\n    add r1, r0, 1\n    mul r1, r1, r0\n    urem r1, r1, 2\n    ret r1\n";
        let mut exe = Executable::new(&parse_asm(src).unwrap());
        for x in [0u64, 1, 2, 3, 255, u64::MAX, u64::MAX - 1, 0x1234_5678_9abc_def1] {
            assert_eq!(value(exe.run(&[x], &ENV0, 100).unwrap()), 0, "x={x}");
        }
    }

    #[test]
    fn infinite_loop_exhausts_budget() {
        let o = concrete_run(&parse_asm("fn f(0 args)\nl:\n    jmp l\n").unwrap(), &[], &ENV0, 1000).unwrap();
        assert_eq!(o, Outcome::BudgetExhausted);
    }

    #[test]
    fn faults() {
        assert_eq!(
            ret("fn f(1 args)\ne:\n    udiv r0, r0, 0\n    ret r0\n", &[3]),
            Outcome::Fault(Fault::DivByZero)
        );
        assert_eq!(
            ret("fn f(1 args)\ne:\n    load r1, [r0]\n    ret r1\n", &[0x10000]),
            Outcome::Fault(Fault::OutOfBounds { addr: 0x10000 })
        );
        assert_eq!(
            ret("fn f(1 args)\ne:\n    load r1, [r0+4]\n    ret r1\n", &[0x100]),
            Outcome::Fault(Fault::Misaligned { addr: 0x104 })
        );
    }

    #[test]
    fn arity_checked() {
        let p = parse_asm("fn f(2 args)\ne:\n    ret r0\n").unwrap();
        assert_eq!(concrete_run(&p, &[1], &ENV0, 10), Err(RunError::Arity { expected: 2, got: 1 }));
    }

    #[test]
    fn output_trace_and_memory_reset() {
        let src = "\
fn f(1 args)
e:
    movimm r1, 0xf000
    load r2, [r1]
    add r2, r2, r0
    store [r1], r2
    store [r1+8], r0
    ret r2
";
        let mut exe = Executable::new(&parse_asm(src).unwrap());
        for _ in 0..2 {
            // a stale word from the previous run would make this 10
            let o = exe.run(&[5], &ENV0, 100).unwrap();
            assert_eq!(
                o,
                Outcome::Returned(Observation { value: 5, output: vec![(0xf000, 5), (0xf008, 5)] })
            );
        }
    }

    #[test]
    fn calls_preserve_caller_registers() {
        let src = "\
fn g(1 args)
g0:
    mul r0, r0, r0
    movimm r5, 99
    ret r0
fn main(2 args)
e:
    movimm r5, 3
    call g k
k:
    add r0, r0, r5
    ret r0
.entry main
";
        assert_eq!(value(ret(src, &[4, 0])), 19);
    }

    #[test]
    fn flags_and_conditions() {
        let f = Flags::from_cmp(1, 2);
        assert!(f.cf && !f.zf && f.sf && !f.of);
        assert!(Cond::Ult.holds(f) && Cond::Slt.holds(f) && Cond::Ne.holds(f));
        let f = Flags::from_cmp(i64::MIN as u64, 1);
        assert!(f.of && !f.sf);
        assert!(Cond::Slt.holds(f));
        for c in Cond::ALL {
            assert_ne!(c.holds(f), c.negate().holds(f));
        }
    }

    #[test]
    fn floats_and_env() {
        let src = "\
fn f(1 args)
e:
    itof f0, r0
    fmul f1, f0, f0
    fadd f2, f1, f0
    fcmp r1, f2, f1
    getenv r2, 3
    add r1, r1, r2
    ret r1
";
        let mut env = ENV0;
        env[3] = 40;
        let o = concrete_run(&parse_asm(src).unwrap(), &[3], &env, 100).unwrap();
        assert_eq!(value(o), 42); // 12 > 9 -> code 2
    }
}
