use super::{FrogStatus, GridState, GRID};

pub const CHANNELS: usize = 3;
pub const OBS_LEN: usize = CHANNELS * GRID * GRID;

/// Three 8×8 integer planes, channel-major then row-major:
/// frog markers (1 = A, 2 = B), car presence, signed car velocity.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation([i8; OBS_LEN]);

/// Byte key for tabular lookup: one signed byte per cell in observation order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey(pub [u8; OBS_LEN]);

impl Observation {
    pub fn zeros() -> Self {
        Self([0; OBS_LEN])
    }

    pub(super) fn encode(state: &GridState) -> Self {
        let mut obs = Self::zeros();
        for car in &state.cars {
            obs.set(1, car.row, car.col, 1);
            obs.set(2, car.row, car.col, car.velocity);
        }
        // Frog B first so that A's marker wins on a shared cell.
        for (i, frog) in state.frogs.iter().enumerate().rev() {
            if frog.status != FrogStatus::Dead {
                obs.set(0, frog.row, frog.col, i as i8 + 1);
            }
        }
        obs
    }

    fn idx(channel: usize, row: u8, col: u8) -> usize {
        (channel * GRID + usize::from(row)) * GRID + usize::from(col)
    }

    fn set(&mut self, channel: usize, row: u8, col: u8, v: i8) {
        self.0[Self::idx(channel, row, col)] = v;
    }

    pub fn get(&self, channel: usize, row: u8, col: u8) -> i8 {
        self.0[Self::idx(channel, row, col)]
    }

    pub fn as_slice(&self) -> &[i8; OBS_LEN] {
        &self.0
    }

    pub fn from_cells(cells: [i8; OBS_LEN]) -> Self {
        Self(cells)
    }

    /// Writes the flat float view used as network input.
    pub fn write_f32(&self, out: &mut [f32]) {
        for (o, &v) in out.iter_mut().zip(self.0.iter()) {
            *o = f32::from(v);
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| f32::from(v)).collect()
    }

    pub fn canonical_key(&self) -> StateKey {
        StateKey(self.0.map(|v| v as u8))
    }
}

impl std::fmt::Debug for Observation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let planes: Vec<Vec<&[i8]>> = self.0.chunks(GRID * GRID).map(|p| p.chunks(GRID).collect()).collect();
        f.debug_struct("Observation").field("planes", &planes).finish()
    }
}

impl StateKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl std::fmt::Debug for StateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StateKey({})", self.to_hex())
    }
}
