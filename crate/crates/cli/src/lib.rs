//! The `pam` command line tool and its HTTP service.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod api;
pub mod cli;
pub mod render;
