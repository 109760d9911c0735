//! Shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::fmt;

pub mod invariants;
pub mod oracles;
pub mod reference;

/// Outcome of comparing a computed result with an expected one.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub err: f64,
    pub tol: f64,
    pub passed: bool,
    pub note: String,
}

impl Check {
    pub fn ok(name: &str, tol: f64) -> Self {
        Check {
            name: name.to_string(),
            err: 0.0,
            tol,
            passed: true,
            note: String::new(),
        }
    }

    pub fn failed(name: &str, note: &str) -> Self {
        Check {
            name: name.to_string(),
            err: f64::INFINITY,
            tol: 0.0,
            passed: false,
            note: note.to_string(),
        }
    }

    fn compare(name: &str, got: &[f64], expect: &[f64], tol: f64, scale: impl Fn(f64) -> f64) -> Self {
        if got.len() != expect.len() {
            return Check::failed(name, &format!("length {} vs {}", got.len(), expect.len()));
        }
        let err = got
            .iter()
            .zip(expect)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() / scale(*b) })
            .fold(0.0, f64::max);
        Check {
            name: name.to_string(),
            err,
            tol,
            passed: err <= tol,
            note: String::new(),
        }
    }

    /// Largest `|got − expect|`.
    pub fn abs(name: &str, got: &[f64], expect: &[f64], tol: f64) -> Self {
        Self::compare(name, got, expect, tol, |_| 1.0)
    }

    /// Largest `|got − expect| / max(1, |expect|)`.
    pub fn rel(name: &str, got: &[f64], expect: &[f64], tol: f64) -> Self {
        Self::compare(name, got, expect, tol, |e| e.abs().max(1.0))
    }

    /// Combines two checks; the result passes only if both do.
    pub fn max(self, other: Check) -> Check {
        let name = if self.name.is_empty() { other.name } else { self.name };
        let note = match (self.note.is_empty(), other.note.is_empty()) {
            (true, _) => other.note,
            (false, true) => self.note,
            (false, false) => format!("{}; {}", self.note, other.note),
        };
        Check {
            name,
            err: self.err.max(other.err),
            tol: self.tol.max(other.tol),
            passed: self.passed && other.passed,
            note,
        }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{self}");
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} (max err {:.2e}, tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.err,
            self.tol
        )?;
        if !self.note.is_empty() {
            write!(f, " [{}]", self.note)?;
        }
        Ok(())
    }
}
