//! Geometric task functions and the example grammar.

mod geometry;
mod grammar;

pub use geometry::{angle, compass, crossing, distance, inside, perimeter, tri_area};
pub use geometry::{CompassDir, Point};
pub use grammar::{
    compute_answer, parse_example, render_example, Answer, ParseError, ParseErrorKind,
    ParsedExample, TaskExample, TaskKind,
};
