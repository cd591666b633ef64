use std::fmt::Write;

use super::{FrogStatus, GridState, GRID};

fn car_glyph(velocity: i8) -> char {
    match velocity {
        1 => '>',
        -1 => '<',
        2 => '»',
        -2 => '«',
        v if v > 0 => '⇉',
        _ => '⇇',
    }
}

fn status_name(s: FrogStatus) -> &'static str {
    match s {
        FrogStatus::Active => "active",
        FrogStatus::Finished => "finished",
        FrogStatus::Dead => "dead",
    }
}

/// Text board, goal row on top. `A`/`B` are frogs (`&` when they share a
/// cell), `>`/`<` speed-1 cars, `»`/`«` speed 2, `⇉`/`⇇` speed 3.
/// The last line carries the tick and frog statuses.
pub fn render(state: &GridState) -> String {
    let mut grid = [['.'; GRID]; GRID];
    for car in &state.cars {
        grid[usize::from(car.row)][usize::from(car.col)] = car_glyph(car.velocity);
    }
    for (i, frog) in state.frogs.iter().enumerate() {
        if frog.status == FrogStatus::Dead {
            continue;
        }
        let cell = &mut grid[usize::from(frog.row)][usize::from(frog.col)];
        *cell = match (*cell, i) {
            ('A', _) | ('B', _) => '&',
            (_, 0) => 'A',
            _ => 'B',
        };
    }
    let mut out = String::new();
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    write!(out, "tick={}", state.tick).unwrap();
    for (i, frog) in state.frogs.iter().enumerate() {
        let name = if i == 0 { 'A' } else { 'B' };
        write!(out, " {name}={}", status_name(frog.status)).unwrap();
    }
    out.push('\n');
    out
}
