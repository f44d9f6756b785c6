use core::fmt;
use core::str::FromStr;

/// Material category of a shredded fragment.
///
/// The discriminant doubles as the class id used in annotation files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaterialClass {
    Metal = 0,
    CircuitBoard = 1,
    Plastic = 2,
}

impl MaterialClass {
    pub const COUNT: usize = 3;
    pub const ALL: [MaterialClass; 3] = [Self::Metal, Self::CircuitBoard, Self::Plastic];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Metal => "metal",
            Self::CircuitBoard => "circuit_board",
            Self::Plastic => "plastic",
        }
    }
}

impl fmt::Display for MaterialClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per material class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PerClass<T> {
    pub metal: T,
    pub circuit_board: T,
    pub plastic: T,
}

impl<T> PerClass<T> {
    pub fn new(metal: T, circuit_board: T, plastic: T) -> Self {
        Self { metal, circuit_board, plastic }
    }

    pub fn from_fn(mut f: impl FnMut(MaterialClass) -> T) -> Self {
        Self {
            metal: f(MaterialClass::Metal),
            circuit_board: f(MaterialClass::CircuitBoard),
            plastic: f(MaterialClass::Plastic),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerClass<U> {
        PerClass::from_fn(|c| f(&self[c]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (MaterialClass, &T)> {
        MaterialClass::ALL.into_iter().map(move |c| (c, &self[c]))
    }
}

impl<T> core::ops::Index<MaterialClass> for PerClass<T> {
    type Output = T;
    fn index(&self, c: MaterialClass) -> &T {
        match c {
            MaterialClass::Metal => &self.metal,
            MaterialClass::CircuitBoard => &self.circuit_board,
            MaterialClass::Plastic => &self.plastic,
        }
    }
}

impl<T> core::ops::IndexMut<MaterialClass> for PerClass<T> {
    fn index_mut(&mut self, c: MaterialClass) -> &mut T {
        match c {
            MaterialClass::Metal => &mut self.metal,
            MaterialClass::CircuitBoard => &mut self.circuit_board,
            MaterialClass::Plastic => &mut self.plastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown material class")]
pub struct UnknownClass;

impl FromStr for MaterialClass {
    type Err = UnknownClass;

    /// Accepts the numeric class id or a (case-insensitive) name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Self::from_index(i).ok_or(UnknownClass);
        }
        match s.to_ascii_lowercase().as_str() {
            "metal" | "metals" => Ok(Self::Metal),
            "circuit_board" | "circuitboard" | "board" | "circuit-board" => Ok(Self::CircuitBoard),
            "plastic" | "plastics" => Ok(Self::Plastic),
            _ => Err(UnknownClass),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names_and_ids() {
        assert_eq!("0".parse::<MaterialClass>(), Ok(MaterialClass::Metal));
        assert_eq!("Circuit_Board".parse::<MaterialClass>(), Ok(MaterialClass::CircuitBoard));
        assert_eq!("plastic".parse::<MaterialClass>(), Ok(MaterialClass::Plastic));
        assert!("3".parse::<MaterialClass>().is_err());
        assert!("glass".parse::<MaterialClass>().is_err());
    }
}
