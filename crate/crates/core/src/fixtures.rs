//! Small in-memory schemas used by tests, golden prompts and demos.

use std::path::PathBuf;

use crate::corpus::{ColumnSpec, DataType, DatabaseSchema, TableSpec};

/// The two-table student/dorm schema used by the golden prompts.
///
/// `dorm.dormid` references `Dorm_amenity`, which is not part of this
/// excerpt, so the schema intentionally fails [`DatabaseSchema::validate`].
pub fn student_dorm_schema() -> DatabaseSchema {
    DatabaseSchema {
        db_id: "dorm_1".into(),
        tables: vec![
            TableSpec::new(
                "student",
                vec![
                    ColumnSpec::new("StuID", DataType::Number).primary_key(),
                    ColumnSpec::new("Fname", DataType::Text),
                    ColumnSpec::new("LName", DataType::Text),
                ],
            ),
            TableSpec::new(
                "dorm",
                vec![
                    ColumnSpec::new("dormid", DataType::Number)
                        .primary_key()
                        .references("Dorm_amenity", "dormid"),
                    ColumnSpec::new("dorm_name", DataType::Text),
                ],
            ),
        ],
        db_file_path: PathBuf::new(),
    }
}
