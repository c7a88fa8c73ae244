use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! attribute_enum {
    (
        $(#[$meta:meta])*
        $name:ident { $($variant:ident => $slug:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Stable one-byte code used by the binary dataset format.
            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(code: u8) -> Result<Self> {
                Self::ALL.get(code as usize).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        concat!("invalid ", stringify!($name), " code {}"),
                        code
                    ))
                })
            }

            pub fn slug(self) -> &'static str {
                match self {
                    $($name::$variant => $slug),+
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.slug())
            }
        }
    };
}

attribute_enum! {
    /// Body part that performs the motion.
    Initiator {
        LeftHand => "left-hand",
        RightHand => "right-hand",
        Head => "head",
        Shoulder => "shoulder",
    }
}

attribute_enum! {
    /// Body part the motion is directed at.
    Receiver {
        Nose => "nose",
        Eye => "eye",
        Eyebrow => "eyebrow",
        Neck => "neck",
        Ear => "ear",
        Chin => "chin",
    }
}

attribute_enum! {
    Direction {
        Upward => "upward",
        Downward => "downward",
        Leftward => "leftward",
        Rightward => "rightward",
        Toward => "toward",
        Away => "away",
    }
}

attribute_enum! {
    MotionType {
        Touch => "touch",
        Rub => "rub",
        Scratch => "scratch",
        Tap => "tap",
    }
}

impl Initiator {
    /// Words as they appear in descriptions ("the right hand ...").
    pub fn phrase(self) -> &'static str {
        match self {
            Initiator::LeftHand => "left hand",
            Initiator::RightHand => "right hand",
            Initiator::Head => "head",
            Initiator::Shoulder => "shoulder",
        }
    }
}

impl MotionType {
    pub fn third_person(self) -> &'static str {
        match self {
            MotionType::Touch => "touches",
            MotionType::Rub => "rubs",
            MotionType::Scratch => "scratches",
            MotionType::Tap => "taps",
        }
    }

    pub fn gerund(self) -> &'static str {
        match self {
            MotionType::Touch => "touching",
            MotionType::Rub => "rubbing",
            MotionType::Scratch => "scratching",
            MotionType::Tap => "tapping",
        }
    }
}

/// The four-attribute decomposition of one micro-gesture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticAttributes {
    pub initiator: Initiator,
    pub receiver: Receiver,
    pub direction: Direction,
    pub motion_type: MotionType,
}

impl SemanticAttributes {
    pub const fn new(initiator: Initiator, receiver: Receiver, direction: Direction, motion_type: MotionType) -> Self {
        Self {
            initiator,
            receiver,
            direction,
            motion_type,
        }
    }

    pub fn codes(&self) -> [u8; 4] {
        [
            self.initiator.code(),
            self.receiver.code(),
            self.direction.code(),
            self.motion_type.code(),
        ]
    }

    pub fn from_codes(codes: [u8; 4]) -> Result<Self> {
        Ok(Self {
            initiator: Initiator::from_code(codes[0])?,
            receiver: Receiver::from_code(codes[1])?,
            direction: Direction::from_code(codes[2])?,
            motion_type: MotionType::from_code(codes[3])?,
        })
    }
}

impl std::fmt::Display for SemanticAttributes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.initiator, self.receiver, self.direction, self.motion_type
        )
    }
}

/// Ordered set of admissible attribute tuples. The position of a tuple is
/// its category id, so this doubles as the dataset's category map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SemanticAttributes>", into = "Vec<SemanticAttributes>")]
pub struct AdmissibleSet {
    tuples: Vec<SemanticAttributes>,
}

impl AdmissibleSet {
    pub fn new(tuples: Vec<SemanticAttributes>) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::Config("admissible attribute set is empty".into()));
        }
        for (i, a) in tuples.iter().enumerate() {
            if let Some(j) = tuples[..i].iter().position(|b| b == a) {
                return Err(Error::Config(format!(
                    "admissible tuple {a} listed twice (positions {j} and {i})"
                )));
            }
        }
        Ok(Self { tuples })
    }

    /// The sixteen-category default: one tuple per (initiator, motion type).
    pub fn default_set() -> Self {
        use Direction::*;
        use Initiator::*;
        use MotionType::*;
        use Receiver::*;
        let t = SemanticAttributes::new;
        Self {
            tuples: vec![
                t(RightHand, Nose, Upward, Rub),
                t(RightHand, Neck, Toward, Touch),
                t(RightHand, Ear, Upward, Scratch),
                t(RightHand, Chin, Toward, Tap),
                t(LeftHand, Eye, Toward, Rub),
                t(LeftHand, Nose, Toward, Touch),
                t(LeftHand, Eyebrow, Upward, Scratch),
                t(LeftHand, Neck, Rightward, Tap),
                t(Head, Ear, Leftward, Rub),
                t(Head, Chin, Downward, Touch),
                t(Head, Eyebrow, Rightward, Scratch),
                t(Head, Neck, Downward, Tap),
                t(Shoulder, Ear, Upward, Touch),
                t(Shoulder, Chin, Toward, Rub),
                t(Shoulder, Neck, Away, Scratch),
                t(Shoulder, Ear, Away, Tap),
            ],
        }
    }

    /// Keeps the first `k` tuples of the default set.
    pub fn default_prefix(k: usize) -> Result<Self> {
        let all = Self::default_set();
        if k == 0 || k > all.len() {
            return Err(Error::Config(format!(
                "default category set has {} tuples, requested {k}",
                all.len()
            )));
        }
        Self::new(all.tuples[..k].to_vec())
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[SemanticAttributes] {
        &self.tuples
    }

    pub fn get(&self, category_id: usize) -> Option<&SemanticAttributes> {
        self.tuples.get(category_id)
    }

    pub fn category_of(&self, attrs: &SemanticAttributes) -> Option<usize> {
        self.tuples.iter().position(|a| a == attrs)
    }

    pub fn contains(&self, attrs: &SemanticAttributes) -> bool {
        self.category_of(attrs).is_some()
    }
}

impl TryFrom<Vec<SemanticAttributes>> for AdmissibleSet {
    type Error = Error;

    fn try_from(tuples: Vec<SemanticAttributes>) -> Result<Self> {
        Self::new(tuples)
    }
}

impl From<AdmissibleSet> for Vec<SemanticAttributes> {
    fn from(set: AdmissibleSet) -> Self {
        set.tuples
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for &i in Initiator::ALL {
            for &r in Receiver::ALL {
                for &d in Direction::ALL {
                    for &m in MotionType::ALL {
                        let a = SemanticAttributes::new(i, r, d, m);
                        assert_eq!(SemanticAttributes::from_codes(a.codes()).unwrap(), a);
                    }
                }
            }
        }
        assert!(Receiver::from_code(6).is_err());
    }

    #[test]
    fn empty_or_duplicated_sets_are_config_errors() {
        assert!(matches!(AdmissibleSet::new(vec![]), Err(Error::Config(_))));
        let a = AdmissibleSet::default_set().tuples()[0];
        assert!(matches!(AdmissibleSet::new(vec![a, a]), Err(Error::Config(_))));
    }

    #[test]
    fn label_fidelity_round_trip() {
        let set = AdmissibleSet::default_set();
        assert_eq!(set.len(), 16);
        for (c, a) in set.tuples().iter().enumerate() {
            assert_eq!(set.category_of(a), Some(c));
            assert_eq!(set.get(c), Some(a));
        }
    }

    #[test]
    fn serde_uses_kebab_slugs() {
        let a = SemanticAttributes::new(Initiator::RightHand, Receiver::Nose, Direction::Upward, MotionType::Rub);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(
            json,
            r#"{"initiator":"right-hand","receiver":"nose","direction":"upward","motion_type":"rub"}"#
        );
    }
}
