use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mir::{BinOp, FBinOp, FReg, Inst, MemRef, Reg, Src, UnOp};

/// Instruction emitter over a pool of free registers.
pub struct Builder<'a> {
    pub insts: Vec<Inst>,
    pub rng: &'a mut ChaCha8Rng,
    regs: Vec<Reg>,
    fregs: Vec<FReg>,
}

impl<'a> Builder<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, regs: Vec<Reg>, fregs: Vec<FReg>) -> Builder<'a> {
        Builder { insts: Vec::new(), rng, regs, fregs }
    }

    /// Takes a fresh scratch register.
    pub fn reg(&mut self) -> Reg {
        self.regs.remove(0)
    }

    pub fn freg(&mut self) -> FReg {
        self.fregs.remove(0)
    }

    pub fn bin(&mut self, op: BinOp, dst: Reg, lhs: Reg, rhs: impl Into<Src>) -> Reg {
        self.insts.push(Inst::Bin { op, dst, lhs, rhs: rhs.into() });
        dst
    }

    pub fn bin_imm(&mut self, op: BinOp, dst: Reg, lhs: Reg, imm: u64) -> Reg {
        self.bin(op, dst, lhs, Src::Imm(imm))
    }

    pub fn un(&mut self, op: UnOp, dst: Reg, src: Reg) -> Reg {
        self.insts.push(Inst::Un { op, dst, src });
        dst
    }

    pub fn movimm(&mut self, dst: Reg, imm: u64) -> Reg {
        self.insts.push(Inst::MovImm { dst, imm });
        dst
    }

    pub fn cmp(&mut self, lhs: Reg, rhs: impl Into<Src>) {
        self.insts.push(Inst::Cmp { lhs, rhs: rhs.into() });
    }

    pub fn cmp_imm(&mut self, lhs: Reg, imm: u64) {
        self.cmp(lhs, Src::Imm(imm));
    }

    pub fn load(&mut self, dst: Reg, base: Reg, disp: i64) -> Reg {
        self.insts.push(Inst::Load { dst, addr: MemRef { base, disp } });
        dst
    }

    pub fn store(&mut self, base: Reg, disp: i64, src: Reg) {
        self.insts.push(Inst::Store { addr: MemRef { base, disp }, src });
    }

    pub fn fbin(&mut self, op: FBinOp, dst: FReg, lhs: FReg, rhs: FReg) -> FReg {
        self.insts.push(Inst::FBin { op, dst, lhs, rhs });
        dst
    }

    pub fn fcmp(&mut self, dst: Reg, lhs: FReg, rhs: FReg) -> Reg {
        self.insts.push(Inst::Fcmp { dst, lhs, rhs });
        dst
    }

    pub fn itof(&mut self, dst: FReg, src: Reg) -> FReg {
        self.insts.push(Inst::Itof { dst, src });
        dst
    }

    pub fn getenv(&mut self, dst: Reg, slot: u8) -> Reg {
        self.insts.push(Inst::GetEnv { dst, slot });
        dst
    }

    /// `dst = 2 * src`, as a shift or an addition.
    pub fn double(&mut self, dst: Reg, src: Reg) -> Reg {
        if self.rng.gen_bool(0.5) {
            self.bin_imm(BinOp::Shl, dst, src, 1)
        } else {
            self.bin(BinOp::Add, dst, src, src)
        }
    }
}
